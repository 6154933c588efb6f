"""Loss-threshold and adversarial-distance (LAEQ) detectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..tensor_core import _as_batch, run_forward, softmax_cross_entropy
from .base import Detector, input_grads


def loss_score(model, x, y) -> float:
    """Negative cross-entropy of one ``(x, y)``."""
    xb, _ = _as_batch(model.spec, x)
    loss, _ = softmax_cross_entropy(run_forward(model, xb)[-1], np.array([int(y)]))
    return float(-loss[0])


class LossDetector(Detector):
    name = "loss"

    def scores(self, model, x, y, ids=None):
        xb, _ = _as_batch(model.spec, x)
        out = []
        for i in range(0, len(xb), 512):
            loss, _ = softmax_cross_entropy(run_forward(model, xb[i : i + 512])[-1], y[i : i + 512])
            out.append(-loss)
        return np.concatenate(out)


@dataclass(frozen=True)
class LaeqSpec:
    step: float = 0.05
    budget: int = 100
    eps_cap: Optional[float] = None  # l-inf cap on the perturbation

    def __post_init__(self):
        if not self.step > 0 or self.budget < 1:
            raise ValueError("LAEQ needs step > 0 and budget >= 1")
        if self.eps_cap is not None and not self.eps_cap > 0:
            raise ValueError("eps_cap must be positive")


def laeq_sentinel(spec: LaeqSpec, dim: int) -> float:
    return spec.budget * spec.step * float(np.sqrt(dim))


def laeq_scores(model, x, y, spec: LaeqSpec) -> np.ndarray:
    """L2 norm of the signed-gradient perturbation at the first misclassification.

    Already-misclassified inputs score 0; inputs that survive the whole budget
    get ``budget * step * sqrt(dim)``.
    """
    xb, _ = _as_batch(model.spec, x)
    y = np.asarray(y, dtype=np.int64)
    n = len(xb)
    dim = int(np.prod(model.spec.input_shape))
    scores = np.full(n, laeq_sentinel(spec, dim))
    delta = np.zeros_like(xb)
    active = run_forward(model, xb)[-1].argmax(axis=1) == y
    scores[~active] = 0.0
    for _ in range(spec.budget):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        _, gx, _ = input_grads(model, xb[idx] + delta[idx], y[idx])
        d = delta[idx] + spec.step * np.sign(gx)
        if spec.eps_cap is not None:
            d = np.clip(d, -spec.eps_cap, spec.eps_cap)
        delta[idx] = d
        pred = run_forward(model, xb[idx] + d)[-1].argmax(axis=1)
        flipped = pred != y[idx]
        hit = idx[flipped]
        scores[hit] = np.sqrt((delta[hit].reshape(len(hit), dim) ** 2).sum(axis=1))
        active[hit] = False
    return scores


def laeq_score(model, x, y, spec: LaeqSpec) -> float:
    xb, _ = _as_batch(model.spec, x)
    return float(laeq_scores(model, xb, np.array([int(y)]), spec)[0])


class LaeqDetector(Detector):
    name = "LAEQ"

    def __init__(self, spec: LaeqSpec = LaeqSpec()):
        self.spec = spec

    def scores(self, model, x, y, ids=None):
        return laeq_scores(model, x, y, self.spec)
