"""Binary checkpoint container shared by the three trainable models.

All fields little-endian::

    magic        4 bytes   b"MDNP" predictor, b"MDNE" extractor, b"MDNR" reconstructor
    version      u32       currently 1
    n_ints       u32, then n_ints  x i64   config integers
    n_floats     u32, then n_floats x f64  config reals
    n_tensors    u32, then per tensor:
        ndim u32, ndim x u32 dims, prod(dims) x f64 (C order)
    crc32        u32       zlib.crc32 of every preceding byte

Config integers / reals and tensor order per model:

* predictor: ints (context_dim, embed_dim, n_components, conv_channels,
  conv_kernel, recurrent_width); reals (dropout_rate); tensors in
  ``predictor.parameter_layout`` order.
* extractor: ints (feature_dim, embed_dim, conv_channels[0],
  conv_channels[1], conv_kernel); reals (bn_momentum, bn_eps); tensors in
  ``extractor.extractor_layout`` order followed by the running statistics
  in ``extractor.extractor_buffers`` order.
* reconstructor: ints (context_dim, embed_dim, target_dim); no reals;
  tensors in ``extractor.reconstructor_layout`` order.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .extractor import (ExtractorConfig, ExtractorModel, ReconstructorConfig, ReconstructorModel,
                        extractor_buffers, extractor_layout, reconstructor_layout)
from .predictor import PredictorConfig, PredictorModel, parameter_layout

FORMAT_VERSION = 1
PREDICTOR_MAGIC = b"MDNP"
EXTRACTOR_MAGIC = b"MDNE"
RECONSTRUCTOR_MAGIC = b"MDNR"


class CheckpointError(ValueError):
    pass


def _pack(magic: bytes, ints, floats, tensors) -> bytes:
    parts = [magic, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(ints)), struct.pack(f"<{len(ints)}q", *ints),
             struct.pack("<I", len(floats)), struct.pack(f"<{len(floats)}d", *floats),
             struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.ascontiguousarray(t, dtype="<f8")
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _unpack(blob: bytes, magic: bytes):
    if len(blob) < 8 or blob[:4] != magic:
        raise CheckpointError(f"bad magic: expected {magic!r}, got {blob[:4]!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    (n,) = take("<I")
    ints = take(f"<{n}q")
    (n,) = take("<I")
    floats = take(f"<{n}d")
    (n,) = take("<I")
    tensors = []
    for _ in range(n):
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        tensors.append(arr.astype(np.float64))
    if pos != len(body):
        raise CheckpointError("trailing bytes before checksum")
    return list(ints), list(floats), tensors


def predictor_to_bytes(model: PredictorModel) -> bytes:
    c = model.config
    ints = [c.context_dim, c.embed_dim, c.n_components, c.conv_channels, c.conv_kernel,
            c.recurrent_width]
    return _pack(PREDICTOR_MAGIC, ints, [c.dropout_rate],
                 [model.params[n] for n, _, _ in parameter_layout(c)])


def predictor_from_bytes(blob: bytes) -> PredictorModel:
    ints, floats, tensors = _unpack(blob, PREDICTOR_MAGIC)
    cfg = PredictorConfig(*ints, dropout_rate=floats[0])
    names = [n for n, _, _ in parameter_layout(cfg)]
    if len(tensors) != len(names):
        raise CheckpointError(f"expected {len(names)} tensors, found {len(tensors)}")
    return PredictorModel(cfg, dict(zip(names, tensors)))


def extractor_to_bytes(model: ExtractorModel) -> bytes:
    c = model.config
    ints = [c.feature_dim, c.embed_dim, c.conv_channels[0], c.conv_channels[1], c.conv_kernel]
    tensors = [model.params[n] for n, _, _ in extractor_layout(c)]
    tensors += [model.buffers[n] for n, _ in extractor_buffers(c)]
    return _pack(EXTRACTOR_MAGIC, ints, [c.bn_momentum, c.bn_eps], tensors)


def extractor_from_bytes(blob: bytes) -> ExtractorModel:
    ints, floats, tensors = _unpack(blob, EXTRACTOR_MAGIC)
    cfg = ExtractorConfig(ints[0], ints[1], (ints[2], ints[3]), ints[4], floats[0], floats[1])
    names = [n for n, _, _ in extractor_layout(cfg)]
    bufs = [n for n, _ in extractor_buffers(cfg)]
    if len(tensors) != len(names) + len(bufs):
        raise CheckpointError("tensor count does not match extractor config")
    return ExtractorModel(cfg, dict(zip(names, tensors)), dict(zip(bufs, tensors[len(names):])))


def reconstructor_to_bytes(model: ReconstructorModel) -> bytes:
    c = model.config
    return _pack(RECONSTRUCTOR_MAGIC, [c.context_dim, c.embed_dim, c.target_dim], [],
                 [model.params[n] for n, _, _ in reconstructor_layout(c)])


def reconstructor_from_bytes(blob: bytes) -> ReconstructorModel:
    ints, _, tensors = _unpack(blob, RECONSTRUCTOR_MAGIC)
    cfg = ReconstructorConfig(*ints)
    names = [n for n, _, _ in reconstructor_layout(cfg)]
    if len(tensors) != len(names):
        raise CheckpointError("tensor count does not match reconstructor config")
    return ReconstructorModel(cfg, dict(zip(names, tensors)))


def save(model, path) -> None:
    if isinstance(model, PredictorModel):
        blob = predictor_to_bytes(model)
    elif isinstance(model, ExtractorModel):
        blob = extractor_to_bytes(model)
    elif isinstance(model, ReconstructorModel):
        blob = reconstructor_to_bytes(model)
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    with open(path, "wb") as fh:
        fh.write(blob)


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    loaders = {PREDICTOR_MAGIC: predictor_from_bytes, EXTRACTOR_MAGIC: extractor_from_bytes,
               RECONSTRUCTOR_MAGIC: reconstructor_from_bytes}
    try:
        return loaders[blob[:4]](blob)
    except KeyError:
        raise CheckpointError(f"{path}: unknown checkpoint magic {blob[:4]!r}") from None
