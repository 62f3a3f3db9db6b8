"""Finite-difference gradient checks for every layer and a reduced model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import GRU, Attention, Linear, attention_pool, cross_entropy, dropout_apply, gru_forward, linear_forward
from .model import ModelConfig, RobustSleepNet
from .tensor import GradCheckReport, Tensor, gradient_check, precision, softmax

# small enough that every parameter coordinate of the model can be perturbed
REDUCED_CONFIG = ModelConfig(T=3, L=64, n_fft=16, n_stride=8, f_red=4, n_heads=2, k1=3, h1=3, p=4, k2=3, h2=3,
                             p1=0.0, p2=0.0)

# the model loss sums many terms; a wider step keeps roundoff in the
# central difference well below the tolerance
MODEL_EPS = 1e-4


@dataclass
class GradCheckCase:
    name: str
    report: GradCheckReport

    def to_dict(self) -> dict:
        r = self.report
        return {"name": self.name, "max_rel_error": r.max_rel_error, "n_checked": r.n_checked, "passed": r.passed}


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """A random linear functional so every output coordinate matters."""
    w = Tensor(rng.standard_normal(out.shape))
    return (out * w).sum()


def run_gradcheck_suite(seed: int = 0, tol: float = 1e-4, model_coords: int | None = None) -> list[GradCheckCase]:
    """Check each layer and the reduced full model in 64-bit precision."""
    rng = np.random.default_rng(seed)
    cases = []
    with precision("float64"):
        lin = Linear(5, 3, rng)
        x = _t(rng, 4, 5)
        w = Tensor(rng.standard_normal((4, 3)))
        cases.append(GradCheckCase("linear", gradient_check(
            lambda x, *p: (linear_forward(lin, x) * w).sum(), [x, *lin.parameters()], tol=tol)))

        x = _t(rng, 3, 7)
        w = Tensor(rng.standard_normal((3, 7)))
        cases.append(GradCheckCase("softmax", gradient_check(lambda x: (softmax(x, -1) * w).sum(), x, tol=tol)))

        x = _t(rng, 4, 6)
        w = Tensor(rng.standard_normal((4, 6)))

        def drop(x):
            return (dropout_apply(x, 0.5, True, np.random.default_rng(seed + 1)) * w).sum()

        cases.append(GradCheckCase("dropout", gradient_check(drop, x, tol=tol)))

        for bidirectional in (False, True):
            gru = GRU(3, 4, rng, bidirectional=bidirectional)
            seq = _t(rng, 5, 2, 3)
            w = Tensor(rng.standard_normal((5, 2, 8 if bidirectional else 4)))
            cases.append(GradCheckCase(f"gru_{'bi' if bidirectional else 'uni'}", gradient_check(
                lambda s, *p: (gru_forward(gru, s) * w).sum(), [seq, *gru.parameters()], tol=tol)))

        att = Attention(4, 3, rng)
        items = _t(rng, 2, 5, 4)
        w = Tensor(rng.standard_normal((2, 4)))
        cases.append(GradCheckCase("attention", gradient_check(
            lambda it, *p: (attention_pool(att, it)[0] * w).sum(), [items, *att.parameters()], tol=tol)))

        logits = _t(rng, 2, 4, 5)
        labels = np.array([[0, 1, -1, 4], [2, 3, 3, -1]])
        cases.append(GradCheckCase("cross_entropy", gradient_check(
            lambda z: cross_entropy(softmax(z, -1), labels), logits, tol=tol)))

        cfg = REDUCED_CONFIG
        model = RobustSleepNet(cfg, seed=seed)
        windows = Tensor(rng.standard_normal((2, cfg.T, 3, cfg.l_fft, cfg.f_fft)))
        labels = rng.integers(0, 5, size=(2, cfg.T))
        cases.append(GradCheckCase("model_reduced", gradient_check(
            lambda *p: cross_entropy(model.forward(windows), labels), model.parameters(), eps=MODEL_EPS,
            tol=tol, max_coords=model_coords, rng=rng)))
        windows.requires_grad = True
        cases.append(GradCheckCase("model_reduced_input", gradient_check(
            lambda x: cross_entropy(model.forward(x), labels), windows, eps=MODEL_EPS, tol=tol,
            max_coords=40, rng=rng)))
    return cases


def worst_case(cases: list[GradCheckCase]) -> GradCheckCase:
    return max(cases, key=lambda c: c.report.max_rel_error)
