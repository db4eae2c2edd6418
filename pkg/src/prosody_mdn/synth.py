"""Synthetic phone-level prosody corpora with a known generative density.

Generative process for one sequence of K phonemes:

* contexts h_k ~ N(0, I_H)
* a hidden mode z_k with logits ``U h_k + stickiness * onehot(z_{k-1})``
  (no transition term at k = 1)
* e_k drawn from mode z_k, itself a cluster of ``n_atoms`` Gaussian atoms
  spaced ``noise`` apart along a mode-specific axis, each with standard
  deviation ``atom_std_ratio * noise``; mode centres sit ``separation``
  from the origin on +/- coordinate axes
* a (T_k, F) segment rendered from e_k: an affine base level plus an
  e-dependent sinusoid over frames, plus Gaussian noise
* a reconstruction target: the frame mean of that segment

The exact conditional log-density log p(e_k | e_<k, h) is obtained by
forward filtering over z, so the ceiling for any model's likelihood is
known per step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gmm import LOG_2PI, InvalidInputError, logsumexp

CORPUS_FORMAT = "prosody-mdn-corpus"
CORPUS_VERSION = 1
# per-step ceiling applied when reporting true log-densities; only reached
# as noise -> 0, where the density of an observed point diverges
TRUE_LOGLIK_CLAMP = 1e3


@dataclass(frozen=True)
class GeneratorSpec:
    n_modes: int = 4
    embed_dim: int = 4
    context_dim: int = 16
    k_min: int = 6
    k_max: int = 12
    separation: float = 3.0
    noise: float = 1.0
    n_atoms: int = 3
    atom_std_ratio: float = 0.25
    context_gain: float = 1.5
    stickiness: float = 1.5
    feature_dim: int = 8
    t_min: int = 3
    t_max: int = 8
    segment_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_modes < 1 or self.n_atoms < 1:
            raise InvalidInputError("n_modes and n_atoms must be >= 1")
        if self.separation <= 0 or self.noise <= 0 or self.atom_std_ratio <= 0:
            raise InvalidInputError("separation, noise and atom_std_ratio must be > 0")
        if not 1 <= self.k_min <= self.k_max or not 1 <= self.t_min <= self.t_max:
            raise InvalidInputError("invalid length ranges")
        if min(self.embed_dim, self.context_dim, self.feature_dim) < 1:
            raise InvalidInputError("dimensions must be >= 1")


@dataclass
class CorpusItem:
    context: np.ndarray          # (K, H)
    segments: list[np.ndarray]   # K arrays of (T_k, F)
    embeddings: np.ndarray       # (K, D)
    recon_target: np.ndarray     # (K, F)
    step_loglik: np.ndarray      # (K,) exact log p(e_k | e_<k, h)
    modes: np.ndarray            # (K,) hidden mode indices

    def __len__(self):
        return self.context.shape[0]


class GenerativeProcess:
    """Fixed process parameters derived from ``spec.seed``."""

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        S, D, H, F = spec.n_modes, spec.embed_dim, spec.context_dim, spec.feature_dim
        self.centers, self.atom_axes = self._layout(rng)
        offsets = (np.arange(spec.n_atoms) - (spec.n_atoms - 1) / 2.0) * spec.noise
        # atoms[s, a] = centre_s + offset_a * axis_s
        self.atoms = self.centers[:, None, :] + offsets[None, :, None] * self.atom_axes[:, None, :]
        self.atom_var = (spec.atom_std_ratio * spec.noise) ** 2
        self.mode_weights = rng.normal(size=(S, H)) * spec.context_gain / np.sqrt(H)
        self.render_base = rng.normal(size=(F, D)) / np.sqrt(D)
        self.render_offset = rng.normal(size=F) * 0.1
        self.render_amp = rng.normal(size=(F, D)) / np.sqrt(D)
        self.render_phase = rng.uniform(0, 2 * np.pi, size=F)

    def _layout(self, rng):
        spec = self.spec
        S, D = spec.n_modes, spec.embed_dim
        centers = np.zeros((S, D))
        axes = np.zeros((S, D))
        if S <= 2 * D:
            for s in range(S):
                a = s // 2
                centers[s, a] = spec.separation * (1.0 if s % 2 == 0 else -1.0)
                axes[s, (a + 2) % D if D >= 3 else (a + 1) % D] = 1.0
        else:
            dirs = rng.normal(size=(S, D))
            centers = spec.separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
            ax = rng.normal(size=(S, D))
            axes = ax / np.linalg.norm(ax, axis=1, keepdims=True)
        return centers, axes

    # -- densities

    def mode_log_prior(self, h, prev_mode=None):
        logits = h @ self.mode_weights.T
        if prev_mode is not None:
            logits = logits + self.spec.stickiness * np.eye(self.spec.n_modes)[prev_mode]
        return logits - logsumexp(logits)

    def transition_log_probs(self, h):
        """(S_prev, S_next) log P(z_k | z_{k-1}, h_k)."""
        logits = h @ self.mode_weights.T + self.spec.stickiness * np.eye(self.spec.n_modes)
        return logits - logsumexp(logits, axis=1)[:, None]

    def emission_log_density(self, e):
        """log p(e | z = s) for every mode s, shape (S,)."""
        diff = e[None, None, :] - self.atoms
        quad = (diff * diff).sum(-1) / self.atom_var
        D = self.spec.embed_dim
        log_atom = -0.5 * (D * (LOG_2PI + np.log(self.atom_var)) + quad) - np.log(self.spec.n_atoms)
        return logsumexp(log_atom, axis=1)

    def step_log_densities(self, context, embeddings):
        """Exact log p(e_k | e_<k, h) for each step, by forward filtering."""
        log_filter = None
        out = np.empty(len(context))
        for k, (h, e) in enumerate(zip(context, embeddings)):
            if log_filter is None:
                log_pred = self.mode_log_prior(h)
            else:
                log_pred = logsumexp(log_filter[:, None] + self.transition_log_probs(h), axis=0)
            joint = log_pred + self.emission_log_density(e)
            out[k] = logsumexp(joint)
            log_filter = joint - out[k]
        return out

    # -- sampling

    def sample_embeddings(self, context, rng):
        S, A = self.spec.n_modes, self.spec.n_atoms
        K = len(context)
        modes = np.empty(K, dtype=np.int64)
        e = np.empty((K, self.spec.embed_dim))
        prev = None
        for k in range(K):
            p = np.exp(self.mode_log_prior(context[k], prev))
            modes[k] = rng.choice(S, p=p / p.sum())
            atom = rng.integers(A)
            e[k] = self.atoms[modes[k], atom] + np.sqrt(self.atom_var) * rng.standard_normal(self.spec.embed_dim)
            prev = modes[k]
        return e, modes

    def render_segment(self, e, n_frames, rng):
        base = self.render_base @ e + self.render_offset
        amp = self.render_amp @ e
        t = (np.arange(n_frames)[:, None] + 0.5) / n_frames
        clean = base + amp * np.sin(2 * np.pi * t + self.render_phase)
        return clean + self.spec.segment_noise * rng.standard_normal(clean.shape)

    def sample_item(self, rng, context=None) -> CorpusItem:
        spec = self.spec
        if context is None:
            K = int(rng.integers(spec.k_min, spec.k_max + 1))
            context = rng.standard_normal((K, spec.context_dim))
        e, modes = self.sample_embeddings(context, rng)
        segments = [self.render_segment(ek, int(rng.integers(spec.t_min, spec.t_max + 1)), rng)
                    for ek in e]
        target = np.stack([s.mean(axis=0) for s in segments])
        return CorpusItem(context, segments, e, target,
                          self.step_log_densities(context, e), modes)


@dataclass
class SyntheticCorpus:
    spec: GeneratorSpec
    items: list[CorpusItem] = field(default_factory=list)
    start: int = 0

    def __len__(self):
        return len(self.items)

    @property
    def contexts(self):
        return [it.context for it in self.items]

    @property
    def embeddings(self):
        return [it.embeddings for it in self.items]

    @property
    def n_phonemes(self) -> int:
        return sum(len(it) for it in self.items)

    def subset(self, lo: int, hi: int) -> "SyntheticCorpus":
        return SyntheticCorpus(self.spec, self.items[lo:hi], self.start + lo)

    # -- file format: JSON lines, header first, then one record per item

    def save(self, path) -> None:
        header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION,
                  "spec": asdict(self.spec), "start": self.start, "count": len(self.items)}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for i, it in enumerate(self.items):
                rec = {
                    "index": self.start + i,
                    "context": it.context.tolist(),
                    "segments": [s.tolist() for s in it.segments],
                    "embeddings": it.embeddings.tolist(),
                    "recon_target": it.recon_target.tolist(),
                    "step_loglik": it.step_loglik.tolist(),
                    "modes": it.modes.tolist(),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "SyntheticCorpus":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != CORPUS_FORMAT:
                raise InvalidInputError(f"{path}: not a corpus file")
            if header.get("version") != CORPUS_VERSION:
                raise InvalidInputError(f"{path}: unsupported corpus version {header.get('version')}")
            items = []
            for line in fh:
                r = json.loads(line)
                items.append(CorpusItem(
                    np.array(r["context"], dtype=np.float64),
                    [np.array(s, dtype=np.float64) for s in r["segments"]],
                    np.array(r["embeddings"], dtype=np.float64),
                    np.array(r["recon_target"], dtype=np.float64),
                    np.array(r["step_loglik"], dtype=np.float64),
                    np.array(r["modes"], dtype=np.int64)))
        if len(items) != header["count"]:
            raise InvalidInputError(f"{path}: expected {header['count']} items, found {len(items)}")
        return cls(GeneratorSpec(**header["spec"]), items, header["start"])


def generate(spec: GeneratorSpec, count: int, start: int = 0) -> SyntheticCorpus:
    """Items ``start .. start+count-1``; item i uses its own derived stream."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    proc = GenerativeProcess(spec)
    items = [proc.sample_item(np.random.default_rng([spec.seed, 1, i]))
             for i in range(start, start + count)]
    return SyntheticCorpus(spec, items, start)


def true_loglik(item: CorpusItem) -> float:
    """Exact generative log-density of the item's embedding sequence."""
    return float(np.minimum(item.step_loglik, TRUE_LOGLIK_CLAMP).sum())
