"""Central finite-difference checks for every analytic gradient.

Relative error per coordinate is ``|a - n| / max(|a|, |n|, SCALE_FLOOR)``:
coordinates whose true gradient is below the floor are judged on absolute
error, where the finite difference itself carries ~1e-10 of round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .extractor import (ExtractorConfig, ExtractorModel, JointBatch, ReconstructorConfig,
                        ReconstructorModel, joint_loss)
from .gmm import RawMdnHead, activate, nll, nll_grad
from .predictor import PredictorConfig, PredictorModel, sequence_grad, sequence_nll

FD_STEP = 1e-5
SCALE_FLOOR = 1e-6
GMM_TOLERANCE = 1e-4
SEQUENCE_TOLERANCE = 1e-3


def relative_error(analytic, numeric, floor: float = SCALE_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f: Callable[[], float], arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of ``f()`` w.r.t. ``arr``, perturbed in place."""
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + step
        fp = f()
        arr[i] = orig - step
        fm = f()
        arr[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out


@dataclass
class GradcheckReport:
    suite: str
    tolerance: float
    max_error: dict[str, float] = field(default_factory=dict)
    instances: int = 0

    def update(self, group: str, err: float) -> None:
        self.max_error[group] = max(self.max_error.get(group, 0.0), float(err))

    @property
    def failures(self) -> list[str]:
        return [g for g, e in self.max_error.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for g, e in self.max_error.items():
            status = "ok" if e < self.tolerance else "FAIL"
            out.append(f"{self.suite}\t{g}\t{e:.3e}\t{status}")
        return out


def random_head(rng: np.random.Generator, M: int, D: int) -> RawMdnHead:
    return RawMdnHead(rng.normal(0, 1.5, M), rng.normal(0, 1.0, (M, D)), rng.uniform(-1.5, 1.5, (M, D)))


def check_gmm_core(n_instances: int = 100, seed: int = 0, M: int | None = None, D: int | None = None,
                   corrupt: str | None = None) -> GradcheckReport:
    """Mixture NLL gradients on random heads, M in 1..5 and D in 1..4 unless fixed."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport("gmm-core", GMM_TOLERANCE, instances=n_instances)
    for _ in range(n_instances):
        m_ = M or int(rng.integers(1, 6))
        d_ = D or int(rng.integers(1, 5))
        head = random_head(rng, m_, d_)
        # observation near a random component so responsibilities are non-trivial
        y = head.m[rng.integers(m_)] + rng.normal(0, 1.0, d_)
        g = nll_grad(head, y)
        alpha, m, v = head.alpha.copy(), head.m.copy(), head.v.copy()

        def f():
            return nll(activate(RawMdnHead(alpha, m, v)), y)

        for name, arr, ga in (("alpha", alpha, g.alpha), ("m", m, g.m), ("v", v, g.v)):
            if name == corrupt:
                ga = -ga
            report.update(name, relative_error(ga, central_difference(f, arr)).max())
    return report


def random_predictor(rng, cfg: PredictorConfig, scale: float = 0.3) -> PredictorModel:
    model = PredictorModel.initialize(cfg, int(rng.integers(2**31)))
    for p in model.params.values():
        p += rng.normal(0, scale, p.shape)
    return model


def check_sequence_model(n_instances: int = 20, seed: int = 0, cfg: PredictorConfig | None = None,
                         K: int = 3, corrupt: str | None = None) -> GradcheckReport:
    """Full predictor gradient (dropout off) against finite differences."""
    cfg = cfg or PredictorConfig(context_dim=4, embed_dim=2, n_components=2, conv_channels=3,
                                 recurrent_width=3, dropout_rate=0.0)
    rng = np.random.default_rng(seed)
    report = GradcheckReport("sequence-mdn", SEQUENCE_TOLERANCE, instances=n_instances)
    for _ in range(n_instances):
        model = random_predictor(rng, cfg)
        ctx = rng.normal(size=(K, cfg.context_dim))
        target = rng.normal(size=(K, cfg.embed_dim))
        grads = sequence_grad(model, ctx, target)
        for name, p in model.params.items():
            ga = -grads[name] if name == corrupt else grads[name]
            num = central_difference(lambda: sequence_nll(model, ctx, target), p)
            report.update(name, relative_error(ga, num).max())
    return report


def check_joint_reconstruction(n_instances: int = 5, seed: int = 0,
                               corrupt: str | None = None) -> GradcheckReport:
    """Extractor and reconstructor gradients of the reconstruction term.

    Run with beta = 0: with stop-gradient the extractor's analytic gradient
    deliberately omits the prosody-NLL path, so only L_REC is comparable.
    """
    rng = np.random.default_rng(seed)
    report = GradcheckReport("extractor-pipeline", SEQUENCE_TOLERANCE, instances=n_instances)
    H, D, F = 4, 2, 3
    for _ in range(n_instances):
        ext = ExtractorModel.initialize(ExtractorConfig(F, D, (2, 2)), int(rng.integers(2**31)))
        pred = random_predictor(rng, PredictorConfig(H, D, 2, 3, 3, 3, 0.0))
        rec = ReconstructorModel.initialize(ReconstructorConfig(H, D, F), int(rng.integers(2**31)))
        lengths = [int(rng.integers(1, 4)) for _ in range(2)]
        batch = JointBatch([rng.normal(size=(k, H)) for k in lengths],
                           [[rng.normal(size=(int(rng.integers(1, 5)), F)) for _ in range(k)]
                            for k in lengths],
                           [rng.normal(size=(k, F)) for k in lengths])
        _, grads = joint_loss(ext, pred, rec, batch, 0.0)

        def f():
            return joint_loss(ext, pred, rec, batch, 0.0)[0].total

        for prefix, model, g in (("extractor", ext, grads.extractor),
                                 ("reconstructor", rec, grads.reconstructor)):
            for name, p in model.params.items():
                key = f"{prefix}.{name}"
                ga = -g[name] if key == corrupt else g[name]
                report.update(key, relative_error(ga, central_difference(f, p)).max())
    return report
