"""Component-count sweep and sample-diversity evaluation."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .gmm import InvalidInputError
from .optim import Schedule, TrainingDiverged
from .predictor import PredictorConfig, PredictorModel, sample_batch, sequence_logliks, train_predictor
from .synth import SyntheticCorpus, true_loglik

log = logging.getLogger(__name__)


def mean_loglik(model: PredictorModel, corpus: SyntheticCorpus) -> float:
    """Held-out log-likelihood: total log density per phoneme."""
    return float(sequence_logliks(model, corpus.contexts, corpus.embeddings).sum() / corpus.n_phonemes)


def loglik_with_error(model: PredictorModel, corpus: SyntheticCorpus):
    """Per-phoneme log-likelihood and its standard error over sequences."""
    per_seq = sequence_logliks(model, corpus.contexts, corpus.embeddings)
    return _ratio_mean_se(per_seq, corpus)


def truth_loglik_with_error(corpus: SyntheticCorpus):
    per_seq = np.array([true_loglik(it) for it in corpus.items])
    return _ratio_mean_se(per_seq, corpus)


def _ratio_mean_se(per_seq: np.ndarray, corpus: SyntheticCorpus):
    lengths = np.array([len(it) for it in corpus.items], dtype=float)
    mean = per_seq.sum() / lengths.sum()
    # delta-method standard error of a ratio of sums
    resid = per_seq - mean * lengths
    se = np.sqrt(len(per_seq) / max(len(per_seq) - 1, 1) * (resid ** 2).sum()) / lengths.sum()
    return float(mean), float(se)


def gap_to_truth(model: PredictorModel, corpus: SyntheticCorpus):
    """(model - truth) per-phoneme log-likelihood and its paired standard error."""
    diff = (sequence_logliks(model, corpus.contexts, corpus.embeddings)
            - np.array([true_loglik(it) for it in corpus.items]))
    return _ratio_mean_se(diff, corpus)


# ------------------------------------------------------------------ sweep

@dataclass
class SweepEntry:
    n_components: int
    train_curve: list[float]
    heldout_curve: list[float]
    seconds: float
    seed: int
    error: str | None = None
    model: PredictorModel | None = field(default=None, repr=False)

    @property
    def final_heldout(self) -> float:
        return self.heldout_curve[-1] if self.heldout_curve else float("nan")


@dataclass
class SweepResult:
    entries: list[SweepEntry]
    epochs: int
    truth_heldout: float
    truth_heldout_se: float

    @property
    def failed(self) -> list[int]:
        return [e.n_components for e in self.entries if e.error is not None]

    def by_m(self) -> dict[int, SweepEntry]:
        return {e.n_components: e for e in self.entries}

    def rows(self):
        for e in self.entries:
            for split, curve in (("train", e.train_curve), ("heldout", e.heldout_curve)):
                for epoch, ll in enumerate(curve, start=1):
                    yield e.n_components, epoch, split, ll


def _train_one(args):
    M, base_cfg, train, heldout, schedule, init_seed = args
    cfg = replace(base_cfg, n_components=M)
    model = PredictorModel.initialize(cfg, init_seed)
    train_curve, heldout_curve = [], []

    def on_epoch(epoch, m, _loss):
        train_curve.append(mean_loglik(m, train))
        heldout_curve.append(mean_loglik(m, heldout))

    t0 = time.perf_counter()
    error = None
    try:
        model, _ = train_predictor(model, train, schedule, on_epoch)
    except TrainingDiverged as exc:
        error = str(exc)
        model = None
    return SweepEntry(M, train_curve, heldout_curve, time.perf_counter() - t0, schedule.seed, error, model)


def run_sweep(train: SyntheticCorpus, heldout: SyntheticCorpus, m_list, schedule: Schedule,
              base_config: PredictorConfig | None = None, init_seed: int | None = None,
              workers: int = 1) -> SweepResult:
    """Train one predictor per component count with identical seeds and schedule.

    Diverged runs are recorded with ``error`` set and the sweep continues.
    """
    m_list = sorted(set(int(m) for m in m_list))
    if not m_list or m_list[0] < 1:
        raise InvalidInputError("component list must be nonempty and positive")
    base_config = base_config or PredictorConfig(
        context_dim=train.spec.context_dim, embed_dim=train.spec.embed_dim)
    init_seed = schedule.seed if init_seed is None else init_seed
    jobs = [(M, base_config, train, heldout, schedule, init_seed) for M in m_list]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_train_one, jobs))
    else:
        entries = [_train_one(j) for j in jobs]
    for e in entries:
        log.info("M=%d held-out %.4f (%.1fs)%s", e.n_components, e.final_heldout, e.seconds,
                 f" FAILED: {e.error}" if e.error else "")
    truth, truth_se = truth_loglik_with_error(heldout)
    return SweepResult(sorted(entries, key=lambda e: e.n_components), schedule.epochs, truth, truth_se)


def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["M", "epoch", "split", "loglik"])
        for M, epoch, split, ll in result.rows():
            w.writerow([M, epoch, split, repr(float(ll))])


# ------------------------------------------------------------------ diversity

@dataclass
class DiversityReport:
    label: str
    mean_distance: float
    half_width: float
    n_samples: int
    n_contexts: int
    per_context: np.ndarray = field(repr=False, default=None)

    @property
    def interval(self) -> tuple[float, float]:
        return self.mean_distance - self.half_width, self.mean_distance + self.half_width


def mean_pairwise_distance(samples: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean over sample pairs of the per-phoneme Euclidean distance, averaged along the sequence.

    ``samples`` is (S, K, D); ``mask`` (K,) marks valid phonemes.
    """
    S = samples.shape[0]
    if S < 2:
        raise InvalidInputError("need at least two samples")
    if mask is not None:
        samples = samples[:, mask.astype(bool)]
    diff = samples[:, None] - samples[None, :]
    dist = np.sqrt((diff * diff).sum(-1)).mean(-1)
    iu = np.triu_indices(S, 1)
    return float(dist[iu].mean())


def bootstrap_half_width(values: np.ndarray, rng: np.random.Generator, n_boot: int = 2000,
                         level: float = 0.95) -> float:
    n = len(values)
    means = values[rng.integers(0, n, size=(n_boot, n))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float((hi - lo) / 2)


def diversity_report(model: PredictorModel, contexts, n_samples: int, rng: np.random.Generator,
                     temperature: float = 1.0, label: str = "model", n_boot: int = 2000) -> DiversityReport:
    if n_samples < 2:
        raise InvalidInputError("n_samples must be >= 2")
    per_context = np.empty(len(contexts))
    for i, ctx in enumerate(contexts):
        ctx = np.asarray(ctx, dtype=np.float64)
        batch = np.broadcast_to(ctx, (n_samples,) + ctx.shape).copy()
        samples = sample_batch(model, batch, np.ones(batch.shape[:2]), rng, temperature)
        per_context[i] = mean_pairwise_distance(samples)
    hw = bootstrap_half_width(per_context, rng, n_boot) if len(contexts) > 1 else float("inf")
    return DiversityReport(label, float(per_context.mean()), hw, n_samples, len(contexts), per_context)


def compare_diversity(model_a: PredictorModel, model_b: PredictorModel, contexts, n_samples: int = 16,
                      seed: int = 0, temperature: float = 1.0, labels=("A", "B")):
    if model_a.config.embed_dim != model_b.config.embed_dim:
        raise InvalidInputError("models disagree on embedding dimension")
    reports = []
    for i, (model, label) in enumerate(zip((model_a, model_b), labels)):
        reports.append(diversity_report(model, contexts, n_samples, np.random.default_rng([seed, i]),
                                        temperature, label))
    return tuple(reports)


def write_diversity_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "mean_distance", "ci_half_width", "n_samples", "n_contexts"])
        for r in reports:
            w.writerow([r.label, repr(r.mean_distance), repr(r.half_width), r.n_samples, r.n_contexts])
