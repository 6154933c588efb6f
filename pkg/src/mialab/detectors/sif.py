"""Self-influence detector.

Score is ``-g^T (H + damping I)^-1 g`` where g is the sample's (subsampled)
parameter gradient and H the Hessian of the sample's own loss restricted to
the same coordinates. The inverse-Hessian product uses one LiSSA recursion
refined by one conjugate-gradient step. Misclassified samples get the lowest
representable score.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..tensor_core import Model, NumericalError, _as_batch, flatten_grads, run_backward, run_forward, softmax_cross_entropy
from .base import Detector
from .glir import DEFAULT_D_SUB, choose_index_set

SIF_SENTINEL = -np.finfo(np.float64).max


@dataclass(frozen=True)
class SifSpec:
    damping: float = 0.01
    scale: float = 10.0
    depth: int = 1
    cg_iters: int = 1
    d_sub: int = DEFAULT_D_SUB
    seed: int = 0
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.damping < 0 or not self.scale > 0 or self.depth < 0 or self.cg_iters < 0:
            raise ValueError(f"invalid SIF spec {self}")


def lissa_cg_solve(hvp: Callable[[np.ndarray], np.ndarray], g: np.ndarray, damping: float,
                   scale: float = 10.0, depth: int = 1, cg_iters: int = 1) -> np.ndarray:
    """Approximate ``(H + damping I)^-1 g``.

    LiSSA: ``h_{j+1} = g + h_j - (H + damping I) h_j / scale`` from ``h_0 = g``,
    estimate ``h_depth / scale``; then ``cg_iters`` conjugate-gradient steps
    on ``(H + damping I) x = g`` started from that estimate.
    """
    def op(v):
        out = hvp(v) + damping * v
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite curvature product")
        return out

    h = g.copy()
    for _ in range(depth):
        h = g + h - op(h) / scale
    x = h / scale
    r = g - op(x)
    p = r.copy()
    rr = float(r @ r)
    for _ in range(cg_iters):
        if rr == 0.0:
            break
        ap = op(p)
        pap = float(p @ ap)
        if pap == 0.0:
            break
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def _flat_grad(model: Model, x1: np.ndarray, y1: np.ndarray) -> np.ndarray:
    acts = run_forward(model, x1)
    _, g = softmax_cross_entropy(acts[-1], y1)
    _, grads = run_backward(model, acts, {len(acts) - 2: g})
    return flatten_grads(model, grads)


def sif_scores(model: Model, x, y, spec: SifSpec = SifSpec()) -> np.ndarray:
    xb, _ = _as_batch(model.spec, x)
    y = np.asarray(y, dtype=np.int64)
    idx = choose_index_set(model.n_params, spec.d_sub, spec.seed)
    theta = model.flat_params()
    pred = run_forward(model, xb)[-1].argmax(axis=1)
    out = np.full(len(xb), SIF_SENTINEL)
    for i in np.flatnonzero(pred == y):
        x1, y1 = xb[i : i + 1], y[i : i + 1]
        g = _flat_grad(model, x1, y1)[idx]

        def hvp(v):
            nv = float(np.linalg.norm(v))
            if nv == 0.0:
                return np.zeros_like(v)
            eps = spec.fd_step / nv
            full = np.zeros_like(theta)
            full[idx] = v
            gp = _flat_grad(model.with_flat_params(theta + eps * full), x1, y1)[idx]
            gm = _flat_grad(model.with_flat_params(theta - eps * full), x1, y1)[idx]
            return (gp - gm) / (2.0 * eps)

        s = -float(g @ lissa_cg_solve(hvp, g, spec.damping, spec.scale, spec.depth, spec.cg_iters))
        if not np.isfinite(s):
            raise NumericalError(f"non-finite self-influence for sample {i}")
        out[i] = max(s, np.nextafter(SIF_SENTINEL, 0.0))
    return out


class SifDetector(Detector):
    name = "SIF"

    def __init__(self, spec: SifSpec = SifSpec()):
        self.spec = spec

    def scores(self, model, x, y, ids=None):
        return sif_scores(model, x, y, self.spec)


def sif_score(model, x, y, spec: SifSpec = SifSpec()) -> float:
    xb, _ = _as_batch(model.spec, x)
    return float(sif_scores(model, xb, np.array([int(y)]), spec)[0])
