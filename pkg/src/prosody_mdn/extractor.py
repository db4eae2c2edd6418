"""Prosody extractor, toy reconstructor and the joint training objective.

The extractor turns each phoneme's (T, F) spectrogram-like segment into
a D-wide embedding: two 3x3 conv -> batch norm -> ReLU blocks, then a
bidirectional GRU over frames whose final forward and backward states are
concatenated.  The reconstructor is an affine decoder from
``context + project(e)`` to a per-phoneme target; it stands in for the
acoustic model.

Joint loss::

    total = beta * L_PP + L_REC

L_PP is the predictor's mean sequence NLL of the extracted embeddings,
which enter it as constants: no L_PP gradient reaches the extractor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .gmm import InvalidInputError
from .optim import Adam, Schedule, TrainingDiverged, clip_by_global_norm
from .predictor import PredictorModel, batch_nll, pad_sequences

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ extractor

@dataclass(frozen=True)
class ExtractorConfig:
    feature_dim: int = 8
    embed_dim: int = 4
    conv_channels: tuple[int, int] = (8, 8)
    conv_kernel: int = 3
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % 2:
            raise InvalidInputError("embed_dim must be even: it concatenates two GRU states")
        if min(self.feature_dim, self.embed_dim, *self.conv_channels) < 1 or self.conv_kernel % 2 == 0:
            raise InvalidInputError(f"invalid extractor config {self}")
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))

    @property
    def recurrent_width(self) -> int:
        return self.embed_dim // 2


def extractor_layout(cfg: ExtractorConfig):
    """(name, shape, fan_in) for trainable tensors, in checkpoint order."""
    c1, c2 = cfg.conv_channels
    k, R, F = cfg.conv_kernel, cfg.recurrent_width, cfg.feature_dim
    layout = [
        ("conv1.weight", (c1, 1, k, k), k * k),
        ("conv1.bias", (c1,), k * k),
        ("bn1.scale", (c1,), 0),
        ("bn1.shift", (c1,), 0),
        ("conv2.weight", (c2, c1, k, k), c1 * k * k),
        ("conv2.bias", (c2,), c1 * k * k),
        ("bn2.scale", (c2,), 0),
        ("bn2.shift", (c2,), 0),
    ]
    for d in ("fwd", "bwd"):
        layout += [
            (f"{d}.w_input", (3 * R, c2 * F), c2 * F),
            (f"{d}.w_hidden", (3 * R, R), R),
            (f"{d}.b_input", (3 * R,), c2 * F),
            (f"{d}.b_hidden", (3 * R,), R),
        ]
    return layout


def extractor_buffers(cfg: ExtractorConfig):
    c1, c2 = cfg.conv_channels
    return [("bn1.running_mean", (c1,)), ("bn1.running_var", (c1,)),
            ("bn2.running_mean", (c2,)), ("bn2.running_var", (c2,))]


class ExtractorModel:
    def __init__(self, config: ExtractorConfig, params, buffers):
        self.config = config
        self.params = {n: np.array(params[n], dtype=np.float64) for n, _, _ in extractor_layout(config)}
        self.buffers = {n: np.array(buffers[n], dtype=np.float64) for n, _ in extractor_buffers(config)}
        for n, shape, _ in extractor_layout(config):
            if self.params[n].shape != shape:
                raise InvalidInputError(f"{n}: expected {shape}, got {self.params[n].shape}")

    @classmethod
    def initialize(cls, config: ExtractorConfig, seed: int = 0) -> "ExtractorModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape, fan_in in extractor_layout(config):
            if name.endswith(".scale"):
                params[name] = np.ones(shape)
            elif fan_in == 0:
                params[name] = np.zeros(shape)
            else:
                params[name] = nn.uniform_init(rng, shape, fan_in)
        buffers = {n: (np.ones(s) if n.endswith("var") else np.zeros(s))
                   for n, s in extractor_buffers(config)}
        return cls(config, params, buffers)

    def copy(self) -> "ExtractorModel":
        return ExtractorModel(self.config, self.params, self.buffers)

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def _pad_segments(segments: Sequence[np.ndarray], feature_dim: int):
    if len(segments) == 0:
        raise InvalidInputError("empty segment batch")
    for i, s in enumerate(segments):
        if np.ndim(s) != 2 or np.shape(s)[0] < 1:
            raise InvalidInputError(f"segment {i} is empty or not (T, F): shape {np.shape(s)}")
    x, mask = pad_sequences(segments, feature_dim)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("segments contain non-finite values")
    return x, mask


def _bigru_forward(p, x, mask, R):
    """Masked bidirectional GRU over frames; returns final states (N, 2R)."""
    N, T, _ = x.shape
    out, caches = [], {}
    for d, steps in (("fwd", range(T)), ("bwd", range(T - 1, -1, -1))):
        h = np.zeros((N, R))
        cs = []
        for t in steps:
            h_new, c = nn.gru_step_forward(x[:, t], h, p[f"{d}.w_input"], p[f"{d}.w_hidden"],
                                           p[f"{d}.b_input"], p[f"{d}.b_hidden"])
            mt = mask[:, t:t + 1]
            h = mt * h_new + (1.0 - mt) * h
            cs.append((t, c))
        out.append(h)
        caches[d] = cs
    return np.concatenate(out, axis=1), caches


def _bigru_backward(p, de, caches, mask, R, x_shape, grads):
    dx = np.zeros(x_shape)
    for d, dh in (("fwd", de[:, :R]), ("bwd", de[:, R:])):
        dh = dh.copy()
        for t, c in reversed(caches[d]):
            mt = mask[:, t:t + 1]
            dx_t, dh_prev, dwi, dwh, dbi, dbh = nn.gru_step_backward(
                dh * mt, c, p[f"{d}.w_input"], p[f"{d}.w_hidden"])
            dx[:, t] += dx_t
            dh = dh * (1.0 - mt) + dh_prev
            grads[f"{d}.w_input"] += dwi
            grads[f"{d}.w_hidden"] += dwh
            grads[f"{d}.b_input"] += dbi
            grads[f"{d}.b_hidden"] += dbh
    return dx


def extract_batch(model: ExtractorModel, segments, train: bool):
    """Embeddings (N, D) for a list of segments, plus cache and new BN stats."""
    cfg, p, buf = model.config, model.params, model.buffers
    x, mask = _pad_segments(segments, cfg.feature_dim)
    N, T, F = x.shape
    m4 = mask[:, :, None, None]
    h = x[..., None] * m4
    layers, new_buffers = [], {}
    for i in (1, 2):
        a, conv_cache = nn.conv2d_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
        bn, bn_cache, (rm, rv) = nn.batch_norm_forward(
            a, mask, p[f"bn{i}.scale"], p[f"bn{i}.shift"], buf[f"bn{i}.running_mean"],
            buf[f"bn{i}.running_var"], train, cfg.bn_momentum, cfg.bn_eps)
        new_buffers[f"bn{i}.running_mean"], new_buffers[f"bn{i}.running_var"] = rm, rv
        h = np.maximum(bn, 0.0) * m4
        layers.append((conv_cache, bn_cache, bn))
    frames = h.reshape(N, T, F * cfg.conv_channels[1])
    e, gru_caches = _bigru_forward(p, frames, mask, cfg.recurrent_width)
    return e, (layers, gru_caches, mask, frames.shape, h.shape), new_buffers


def extract_backward(model: ExtractorModel, de, cache):
    p, cfg = model.params, model.config
    layers, gru_caches, mask, frames_shape, h_shape = cache
    grads = model.zero_grads()
    dframes = _bigru_backward(p, de, gru_caches, mask, cfg.recurrent_width, frames_shape, grads)
    dh = dframes.reshape(h_shape)
    m4 = mask[:, :, None, None]
    for i, (conv_cache, bn_cache, bn) in zip((2, 1), reversed(layers)):
        dbn = dh * m4 * (bn > 0)
        da, dscale, dshift = nn.batch_norm_backward(dbn, bn_cache)
        grads[f"bn{i}.scale"] += dscale
        grads[f"bn{i}.shift"] += dshift
        dh, dw, db = nn.conv2d_backward(da, conv_cache)
        grads[f"conv{i}.weight"] += dw
        grads[f"conv{i}.bias"] += db
    return grads


def extract(model: ExtractorModel, segments, mode: str = "eval") -> np.ndarray:
    """Prosody embeddings (K, D), one per segment.

    Train mode normalizes with the statistics of this batch; it does not
    touch the model's running statistics.
    """
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    e, _, _ = extract_batch(model, segments, mode == "train")
    return e


# ------------------------------------------------------------------ reconstructor

@dataclass(frozen=True)
class ReconstructorConfig:
    context_dim: int = 16
    embed_dim: int = 4
    target_dim: int = 8


def reconstructor_layout(cfg: ReconstructorConfig):
    H, D, F = cfg.context_dim, cfg.embed_dim, cfg.target_dim
    return [("embed_proj.weight", (H, D), D), ("embed_proj.bias", (H,), D),
            ("decoder.weight", (F, H), H), ("decoder.bias", (F,), H)]


class ReconstructorModel:
    def __init__(self, config: ReconstructorConfig, params):
        self.config = config
        self.params = {n: np.array(params[n], dtype=np.float64) for n, _, _ in reconstructor_layout(config)}

    @classmethod
    def initialize(cls, config: ReconstructorConfig, seed: int = 0) -> "ReconstructorModel":
        rng = np.random.default_rng(seed)
        return cls(config, {n: nn.uniform_init(rng, s, f) for n, s, f in reconstructor_layout(config)})

    def copy(self):
        return ReconstructorModel(self.config, self.params)

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def reconstruction_loss(model: ReconstructorModel, ctx, e, targets, mask, with_grad=False):
    """Mean squared error over valid (phoneme, channel) entries.

    Returns ``(loss, grads, d_e)``; the last two are ``None`` unless asked.
    """
    p = model.params
    z = ctx + e @ p["embed_proj.weight"].T + p["embed_proj.bias"]
    recon = z @ p["decoder.weight"].T + p["decoder.bias"]
    err = (recon - targets) * mask[..., None]
    count = mask.sum() * targets.shape[-1]
    loss = float((err * err).sum() / count)
    if not with_grad:
        return loss, None, None
    drecon = 2.0 * err / count
    grads = {
        "decoder.weight": drecon.reshape(-1, drecon.shape[-1]).T @ z.reshape(-1, z.shape[-1]),
        "decoder.bias": drecon.sum(axis=(0, 1)),
    }
    dz = drecon @ p["decoder.weight"]
    grads["embed_proj.weight"] = dz.reshape(-1, dz.shape[-1]).T @ e.reshape(-1, e.shape[-1])
    grads["embed_proj.bias"] = dz.sum(axis=(0, 1))
    return loss, grads, dz @ p["embed_proj.weight"]


# ------------------------------------------------------------------ joint objective

@dataclass(frozen=True)
class JointLossReport:
    total: float
    l_pp: float
    l_rec: float
    beta: float


@dataclass
class JointGradients:
    extractor: dict[str, np.ndarray]
    predictor: dict[str, np.ndarray]
    reconstructor: dict[str, np.ndarray]
    # gradient of beta * L_PP w.r.t. the extractor, zero under stop-gradient
    extractor_from_pp: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class JointBatch:
    contexts: list[np.ndarray]
    segments: list[list[np.ndarray]]
    targets: list[np.ndarray]

    @classmethod
    def from_items(cls, items) -> "JointBatch":
        return cls([it.context for it in items], [it.segments for it in items],
                   [it.recon_target for it in items])


def _scatter(flat, lengths, width):
    out = np.zeros((len(lengths), max(lengths), width))
    pos = 0
    for i, k in enumerate(lengths):
        out[i, :k] = flat[pos:pos + k]
        pos += k
    return out


def _gather(padded, lengths):
    return np.concatenate([padded[i, :k] for i, k in enumerate(lengths)], axis=0)


def joint_loss(extractor: ExtractorModel, predictor: PredictorModel,
               reconstructor: ReconstructorModel, batch: JointBatch, beta: float,
               mode: str = "train", rng: np.random.Generator | None = None,
               zero_embeddings: bool = False, _return_stats: bool = False):
    """Loss report and per-model gradients for one batch.

    ``zero_embeddings`` replaces e by zeros on the reconstruction path
    (the ablation in which prosody carries no information).
    """
    if beta < 0:
        raise InvalidInputError("beta must be >= 0")
    train = mode == "train"
    lengths = [len(s) for s in batch.segments]
    if [len(c) for c in batch.contexts] != lengths or [len(t) for t in batch.targets] != lengths:
        raise InvalidInputError("contexts, segments and targets must align per phoneme")
    flat_segments = [seg for segs in batch.segments for seg in segs]
    e_flat, ext_cache, new_buffers = extract_batch(extractor, flat_segments, train)
    D = extractor.config.embed_dim
    e = _scatter(e_flat, lengths, D)
    ctx, mask = pad_sequences(batch.contexts)
    targets, _ = pad_sequences(batch.targets)

    # stop gradient: the predictor sees a detached copy of e
    e_const = e.copy()
    per_seq, pred_grads = batch_nll(predictor, ctx, e_const, mask, train=train, rng=rng)
    B = len(lengths)
    l_pp = float(per_seq.sum() / B)

    e_rec = np.zeros_like(e) if zero_embeddings else e
    l_rec, rec_grads, de = reconstruction_loss(reconstructor, ctx, e_rec, targets, mask, with_grad=True)
    total = beta * l_pp + l_rec
    if not np.isfinite(l_pp):
        raise TrainingDiverged(-1, "prosody NLL (predictor term)")
    if not np.isfinite(l_rec):
        raise TrainingDiverged(-1, "reconstruction loss (extractor/reconstructor term)")

    for g in pred_grads.values():
        g *= beta / B
    if zero_embeddings:
        ext_grads = extractor.zero_grads()
    else:
        ext_grads = extract_backward(extractor, _gather(de, lengths), ext_cache)
    grads = JointGradients(ext_grads, pred_grads, rec_grads, extractor.zero_grads())
    report = JointLossReport(total, l_pp, l_rec, beta)
    if _return_stats:
        return report, grads, new_buffers
    return report, grads


def train_joint(extractor: ExtractorModel, predictor: PredictorModel,
                reconstructor: ReconstructorModel, corpus, schedule: Schedule,
                beta: float = 0.02, zero_embeddings: bool = False):
    """Adam on the joint loss, all three parameter sets per step.

    Returns ``(extractor, predictor, reconstructor, traces)`` where traces
    maps ``total``, ``l_pp`` and ``l_rec`` to per-epoch means.
    """
    items = list(corpus.items)
    if not items:
        raise InvalidInputError("corpus is empty")
    ext, pred, rec = extractor.copy(), predictor.copy(), reconstructor.copy()
    rng = np.random.default_rng(schedule.seed)
    opts = [Adam(m.params, lr=schedule.learning_rate) for m in (ext, pred, rec)]
    traces = {"total": [], "l_pp": [], "l_rec": []}
    step = 0
    for epoch in range(schedule.epochs):
        order = rng.permutation(len(items))
        sums = {k: 0.0 for k in traces}
        for s in range(0, len(items), schedule.batch_size):
            chunk = [items[i] for i in order[s:s + schedule.batch_size]]
            step += 1
            try:
                report, grads, new_buffers = joint_loss(
                    ext, pred, rec, JointBatch.from_items(chunk), beta, "train", rng,
                    zero_embeddings, _return_stats=True)
            except TrainingDiverged as exc:
                raise TrainingDiverged(step, str(exc).split(" at ")[0].removeprefix("non-finite ")) from exc
            if not zero_embeddings:
                ext.buffers.update(new_buffers)
            for model, g, opt in zip((ext, pred, rec),
                                     (grads.extractor, grads.predictor, grads.reconstructor), opts):
                clip_by_global_norm(g, schedule.clip_norm)
                opt.step(model.params, g)
            for k in traces:
                sums[k] += getattr(report, k) * len(chunk)
        for k in traces:
            traces[k].append(sums[k] / len(items))
        log.debug("joint epoch %d: %s", epoch, {k: v[-1] for k, v in traces.items()})
    return ext, pred, rec, traces
