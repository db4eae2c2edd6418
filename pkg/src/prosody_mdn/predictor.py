"""Autoregressive mixture density network over prosody embedding sequences.

Per step k the network sees the phoneme context sequence through two
same-length 1-D convolutions (ReLU, layer norm, dropout after each) and
the previous embedding e_{k-1}; a GRU carries the history and an affine
projection emits one raw mixture head per step.  e_0 and the initial GRU
state are zero.

Sequences are batched by zero-padding to a common length with a
(B, K) validity mask.  Padded context steps are zeroed before each
convolution so a padded batch reproduces the per-sequence results.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .gmm import InvalidInputError, RawMdnHead, head_nll_and_grad, log_softmax, sample_components
from .optim import Adam, Schedule, TrainingDiverged, clip_by_global_norm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictorConfig:
    context_dim: int = 16
    embed_dim: int = 4
    n_components: int = 20
    conv_channels: int = 16
    conv_kernel: int = 3
    recurrent_width: int = 16
    dropout_rate: float = 0.1

    def __post_init__(self):
        sizes = (self.context_dim, self.embed_dim, self.n_components, self.conv_channels,
                 self.conv_kernel, self.recurrent_width)
        if min(sizes) < 1:
            raise InvalidInputError(f"all sizes must be >= 1: {self}")
        if self.conv_kernel % 2 == 0:
            raise InvalidInputError("conv_kernel must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidInputError("dropout_rate must lie in [0, 1)")

    @property
    def head_width(self) -> int:
        return self.n_components * (1 + 2 * self.embed_dim)


def parameter_layout(cfg: PredictorConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) in checkpoint order."""
    H, D, C, k, R = (cfg.context_dim, cfg.embed_dim, cfg.conv_channels, cfg.conv_kernel,
                     cfg.recurrent_width)
    return [
        ("conv1.weight", (C, H, k), H * k),
        ("conv1.bias", (C,), H * k),
        ("ln1.gain", (C,), 0),
        ("ln1.bias", (C,), 0),
        ("conv2.weight", (C, C, k), C * k),
        ("conv2.bias", (C,), C * k),
        ("ln2.gain", (C,), 0),
        ("ln2.bias", (C,), 0),
        ("gru.w_input", (3 * R, C + D), C + D),
        ("gru.w_hidden", (3 * R, R), R),
        ("gru.b_input", (3 * R,), C + D),
        ("gru.b_hidden", (3 * R,), R),
        ("proj.weight", (cfg.head_width, R), R),
        ("proj.bias", (cfg.head_width,), R),
    ]


class PredictorModel:
    def __init__(self, config: PredictorConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = {}
        for name, shape, _ in parameter_layout(config):
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise InvalidInputError(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} has non-finite entries")
            self.params[name] = arr.copy()

    @classmethod
    def initialize(cls, config: PredictorConfig, seed: int = 0) -> "PredictorModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape, fan_in in parameter_layout(config):
            if name.endswith(".gain"):
                params[name] = np.ones(shape)
            elif fan_in == 0:
                params[name] = np.zeros(shape)
            else:
                params[name] = nn.uniform_init(rng, shape, fan_in)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: PredictorConfig) -> "PredictorModel":
        return cls(config, {n: np.zeros(s) for n, s, _ in parameter_layout(config)})

    def copy(self) -> "PredictorModel":
        return PredictorModel(self.config, self.params)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def __repr__(self):
        return f"PredictorModel({asdict(self.config)})"


def pad_sequences(seqs: Sequence[np.ndarray], width: int | None = None):
    """Stack (K_i, W) arrays into (B, Kmax, W) plus a (B, Kmax) float mask."""
    seqs = [np.asarray(s, dtype=np.float64) for s in seqs]
    if not seqs:
        raise InvalidInputError("empty batch")
    width = seqs[0].shape[1] if width is None else width
    kmax = max(s.shape[0] for s in seqs)
    out = np.zeros((len(seqs), kmax, width))
    mask = np.zeros((len(seqs), kmax))
    for i, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[1] != width or s.shape[0] < 1:
            raise InvalidInputError(f"sequence {i} has shape {s.shape}, expected (K>=1, {width})")
        out[i, :s.shape[0]] = s
        mask[i, :s.shape[0]] = 1.0
    return out, mask


def _check_batch(cfg: PredictorConfig, ctx, prev, mask):
    if ctx.ndim != 3 or ctx.shape[2] != cfg.context_dim:
        raise InvalidInputError(f"context shape {ctx.shape} does not match H={cfg.context_dim}")
    if prev is not None and prev.shape != ctx.shape[:2] + (cfg.embed_dim,):
        raise InvalidInputError(
            f"previous embeddings {prev.shape} do not match context {ctx.shape[:2]}, D={cfg.embed_dim}")
    if not np.all(np.isfinite(ctx)) or (prev is not None and not np.all(np.isfinite(prev))):
        raise InvalidInputError("non-finite input")


def _conv_stack(p, cfg, ctx, mask, train, rng):
    """Both conv blocks; returns the (B, K, C) features and the backward cache."""
    m3 = mask[:, :, None]
    x = ctx * m3
    caches = []
    for layer in (1, 2):
        a, conv_cache = nn.conv1d_forward(x, p[f"conv{layer}.weight"], p[f"conv{layer}.bias"])
        r = np.maximum(a, 0.0)
        ln, ln_cache = nn.layer_norm_forward(r, p[f"ln{layer}.gain"], p[f"ln{layer}.bias"])
        if train and cfg.dropout_rate > 0:
            keep = (rng.random(ln.shape) >= cfg.dropout_rate) / (1.0 - cfg.dropout_rate)
        else:
            keep = None
        d = ln * keep if keep is not None else ln
        x = d * m3
        caches.append((conv_cache, a, ln_cache, keep))
    return x, caches


def _conv_stack_backward(p, dx, caches, mask, grads):
    m3 = mask[:, :, None]
    for layer, (conv_cache, a, ln_cache, keep) in zip((2, 1), reversed(caches)):
        dd = dx * m3
        dln = dd * keep if keep is not None else dd
        dr, dg, db = nn.layer_norm_backward(dln, ln_cache)
        grads[f"ln{layer}.gain"] += dg
        grads[f"ln{layer}.bias"] += db
        da = dr * (a > 0)
        dx, dw, dbias = nn.conv1d_backward(da, conv_cache)
        grads[f"conv{layer}.weight"] += dw
        grads[f"conv{layer}.bias"] += dbias


def shift_previous(targets: np.ndarray) -> np.ndarray:
    """e_{k-1} aligned with step k, zero at k = 0."""
    prev = np.zeros_like(targets)
    prev[:, 1:] = targets[:, :-1]
    return prev


def forward_batch(model: PredictorModel, ctx, targets, mask, train=False, rng=None):
    """Teacher-forced forward over a padded batch.

    ``targets`` holds e_1..e_K; step k consumes e_{k-1}.  Returns the raw
    projection outputs (B, K, M(1+2D)) and a cache for ``backward_batch``.
    """
    cfg, p = model.config, model.params
    _check_batch(cfg, ctx, targets, mask)
    if train and cfg.dropout_rate > 0 and rng is None:
        raise InvalidInputError("train mode with dropout needs an rng")
    feats, conv_caches = _conv_stack(p, cfg, ctx, mask, train, rng)
    prev = shift_previous(targets)
    B, K, _ = ctx.shape
    h = np.zeros((B, cfg.recurrent_width))
    hs = np.empty((B, K, cfg.recurrent_width))
    gru_caches = []
    for k in range(K):
        inp = np.concatenate([feats[:, k], prev[:, k]], axis=1)
        h, c = nn.gru_step_forward(inp, h, p["gru.w_input"], p["gru.w_hidden"],
                                   p["gru.b_input"], p["gru.b_hidden"])
        hs[:, k] = h
        gru_caches.append(c)
    out = hs @ p["proj.weight"].T + p["proj.bias"]
    return out, (conv_caches, gru_caches, hs, mask)


def backward_batch(model: PredictorModel, dout, cache) -> dict[str, np.ndarray]:
    p = model.params
    C = model.config.conv_channels
    conv_caches, gru_caches, hs, mask = cache
    grads = model.zero_grads()
    B, K, _ = dout.shape
    grads["proj.weight"] += dout.reshape(B * K, -1).T @ hs.reshape(B * K, -1)
    grads["proj.bias"] += dout.sum(axis=(0, 1))
    dhs = dout @ p["proj.weight"]
    dfeats = np.zeros((B, K, C))
    dh = np.zeros((B, model.config.recurrent_width))
    for k in reversed(range(K)):
        dh = dh + dhs[:, k]
        dinp, dh, dwi, dwh, dbi, dbh = nn.gru_step_backward(
            dh, gru_caches[k], p["gru.w_input"], p["gru.w_hidden"])
        grads["gru.w_input"] += dwi
        grads["gru.w_hidden"] += dwh
        grads["gru.b_input"] += dbi
        grads["gru.b_hidden"] += dbh
        dfeats[:, k] = dinp[:, :C]
    _conv_stack_backward(p, dfeats, conv_caches, mask, grads)
    return grads


def _split_heads(cfg, out):
    M, D = cfg.n_components, cfg.embed_dim
    lead = out.shape[:-1]
    return (out[..., :M], out[..., M:M + M * D].reshape(lead + (M, D)),
            out[..., M + M * D:].reshape(lead + (M, D)))


def batch_nll(model, ctx, targets, mask, train=False, rng=None, with_grad=True):
    """Per-sequence NLL sums (B,) and, optionally, gradients of their total."""
    cfg = model.config
    out, cache = forward_batch(model, ctx, targets, mask, train, rng)
    alpha, m, v = _split_heads(cfg, out)
    step_nll, da, dm, dv = head_nll_and_grad(alpha, m, v, targets)
    per_seq = (step_nll * mask).sum(axis=1)
    if not with_grad:
        return per_seq, None
    B, K = mask.shape
    w = mask[:, :, None]
    dout = np.concatenate([da * w, (dm * w[..., None]).reshape(B, K, -1),
                           (dv * w[..., None]).reshape(B, K, -1)], axis=-1)
    return per_seq, backward_batch(model, dout, cache)


# ------------------------------------------------------------------ single-sequence API

def _as_batch(ctx, target=None):
    if isinstance(ctx, np.ndarray) and ctx.ndim == 2:
        ctxs = [ctx]
        targets = None if target is None else [target]
    else:
        ctxs = list(ctx)
        targets = None if target is None else list(target)
    c, mask = pad_sequences(ctxs)
    t = None
    if targets is not None:
        if len(targets) != len(ctxs) or any(np.shape(a)[0] != np.shape(b)[0] for a, b in zip(ctxs, targets)):
            raise InvalidInputError("context and target lengths disagree")
        t, _ = pad_sequences(targets)
    return c, t, mask


def predictor_forward(model: PredictorModel, ctx, prev=None, mode: str = "eval",
                      rng: np.random.Generator | None = None) -> list[RawMdnHead]:
    """Raw heads for each of the K steps of one sequence.

    ``prev`` is the embedding sequence e_1..e_K used for teacher forcing;
    ``None`` feeds zeros at every step.
    """
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    ctx = np.asarray(ctx, dtype=np.float64)
    if ctx.ndim != 2:
        raise InvalidInputError(f"context must be (K, H), got {ctx.shape}")
    if prev is None:
        prev = np.zeros((ctx.shape[0], model.config.embed_dim))
    prev = np.asarray(prev, dtype=np.float64)
    if prev.shape[0] != ctx.shape[0]:
        raise InvalidInputError(f"prev has {prev.shape[0]} steps, context has {ctx.shape[0]}")
    mask = np.ones((1, ctx.shape[0]))
    out, _ = forward_batch(model, ctx[None], prev[None], mask, mode == "train", rng)
    return [RawMdnHead.from_flat(o, model.config.n_components, model.config.embed_dim)
            for o in out[0]]


def sequence_nll(model: PredictorModel, ctx, target) -> float:
    """Teacher-forced sum of per-step NLLs; lists of sequences are summed too."""
    c, t, mask = _as_batch(ctx, target)
    per_seq, _ = batch_nll(model, c, t, mask, with_grad=False)
    total = 0.0
    for x in per_seq:
        total += float(x)
    return total


def sequence_grad(model: PredictorModel, ctx, target, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    c, t, mask = _as_batch(ctx, target)
    _, grads = batch_nll(model, c, t, mask, train=mode == "train", rng=rng)
    return grads


def sequence_logliks(model: PredictorModel, contexts, targets, batch_size: int = 256) -> np.ndarray:
    """Per-sequence log-likelihood sums in eval mode."""
    out = []
    for s in range(0, len(contexts), batch_size):
        c, t, mask = _as_batch(contexts[s:s + batch_size], targets[s:s + batch_size])
        per_seq, _ = batch_nll(model, c, t, mask, with_grad=False)
        out.append(-per_seq)
    return np.concatenate(out)


# ------------------------------------------------------------------ sampling

def sample_batch(model: PredictorModel, ctx, mask, rng: np.random.Generator,
                 temperature: float = 1.0) -> np.ndarray:
    """Ancestral sampling for a padded batch; padded steps are returned as zeros."""
    cfg, p = model.config, model.params
    _check_batch(cfg, ctx, None, mask)
    feats, _ = _conv_stack(p, cfg, ctx, mask, False, None)
    B, K, _ = ctx.shape
    h = np.zeros((B, cfg.recurrent_width))
    e = np.zeros((B, cfg.embed_dim))
    out = np.zeros((B, K, cfg.embed_dim))
    for k in range(K):
        inp = np.concatenate([feats[:, k], e], axis=1)
        h, _ = nn.gru_step_forward(inp, h, p["gru.w_input"], p["gru.w_hidden"],
                                   p["gru.b_input"], p["gru.b_hidden"])
        alpha, m, v = _split_heads(cfg, h @ p["proj.weight"].T + p["proj.bias"])
        weights = np.exp(log_softmax(alpha))
        weights /= weights.sum(axis=-1, keepdims=True)
        var = np.maximum(np.exp(v), 1e-6)
        e, _ = sample_components(weights, m, var, rng, temperature)
        e = e * mask[:, k:k + 1]
        out[:, k] = e
    return out


def sample_sequence(model: PredictorModel, ctx, rng: np.random.Generator,
                    temperature: float = 1.0) -> np.ndarray:
    ctx = np.asarray(ctx, dtype=np.float64)
    if ctx.ndim != 2:
        raise InvalidInputError(f"context must be (K, H), got {ctx.shape}")
    return sample_batch(model, ctx[None], np.ones((1, ctx.shape[0])), rng, temperature)[0]


# ------------------------------------------------------------------ training

def train_predictor(model: PredictorModel, corpus, schedule: Schedule,
                    on_epoch: Callable[[int, PredictorModel, float], None] | None = None):
    """Minimize mean sequence NLL with Adam.

    ``corpus`` needs ``contexts`` and ``embeddings`` sequences.  Returns a
    new trained model and the per-epoch mean training loss.
    """
    contexts, targets = list(corpus.contexts), list(corpus.embeddings)
    if not contexts:
        raise InvalidInputError("corpus is empty")
    model = model.copy()
    rng = np.random.default_rng(schedule.seed)
    opt = Adam(model.params, lr=schedule.learning_rate)
    trace = []
    step = 0
    n = len(contexts)
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, schedule.batch_size):
            idx = order[s:s + schedule.batch_size]
            c, t, mask = _as_batch([contexts[i] for i in idx], [targets[i] for i in idx])
            per_seq, grads = batch_nll(model, c, t, mask, train=True, rng=rng)
            loss = float(per_seq.mean())
            step += 1
            if not np.isfinite(loss):
                raise TrainingDiverged(step)
            for g in grads.values():
                g /= len(idx)
            if not np.isfinite(clip_by_global_norm(grads, schedule.clip_norm)):
                raise TrainingDiverged(step, "gradient")
            opt.step(model.params, grads)
            losses.append(loss * len(idx))
        trace.append(sum(losses) / n)
        log.debug("epoch %d loss %.5f", epoch, trace[-1])
        if on_epoch is not None:
            on_epoch(epoch, model, trace[-1])
    return model, trace
