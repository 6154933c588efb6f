"""Interrogation images: optimise noise until its activations match a query's.

The objective is a weighted sum of per-layer MSEs between the activations of
the synthetic input and those of the query. It never looks at the label.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .defense import OBF_EPS, Obfuscation, obfuscate_batch
from .model_zoo import GROUP_NAMES, layer_groups
from .seeds import derive_seed
from .tensor_core import (
    Model,
    NumericalError,
    ShapeError,
    _as_batch,
    normalize_rows,
    normalize_rows_backward,
    run_backward,
    run_forward,
)

STEP_GRID = (80, 120, 200)
LR_GRID = (0.05, 0.1, 0.2)
CLIP_GRID = (True, False)


@dataclass(frozen=True)
class InterrogationConfig:
    group: str = "Late"
    layers: Optional[Tuple[str, ...]] = None  # explicit layer ids override ``group``
    weights: Optional[Tuple[float, ...]] = None  # default: equal
    steps: int = 80
    lr: float = 0.05
    clip: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.layers is None and self.group not in GROUP_NAMES:
            raise ValueError(f"unknown layer group {self.group!r}")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(self.layers))
            if not self.layers:
                raise ValueError("layer set must be non-empty")
        if self.weights is not None:
            w = tuple(float(v) for v in self.weights)
            object.__setattr__(self, "weights", w)
            if any(v < 0 for v in w) or not any(v > 0 for v in w):
                raise ValueError("weights must be non-negative with at least one positive")

    def resolve(self, model: Model) -> Tuple[Tuple[str, ...], Tuple[float, ...]]:
        """Concrete layer ids and weights for ``model``."""
        if self.layers is not None:
            ids = self.layers
        else:
            ids = next(g.members for g in layer_groups(model.spec) if g.name == self.group)
        for lid in ids:
            model.spec.index(lid)
        if self.weights is None:
            weights = (1.0,) * len(ids)
        else:
            if len(self.weights) != len(ids):
                raise ValueError(f"{len(self.weights)} weights for {len(ids)} layers")
            weights = self.weights
        return tuple(ids), tuple(weights)

    def label(self) -> str:
        where = self.group if self.layers is None else "+".join(self.layers)
        return f"{where}-T{self.steps}-lr{self.lr:g}-clip{int(self.clip)}"


def table4_grid(seed: int = 0, groups: Sequence[str] = GROUP_NAMES) -> List[InterrogationConfig]:
    """Every combination of steps, learning rate, clipping and layer group."""
    return [
        InterrogationConfig(group=g, steps=t, lr=lr, clip=c, seed=seed)
        for g in groups
        for c in CLIP_GRID
        for lr in LR_GRID
        for t in STEP_GRID
    ]


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------


def perceptual_loss(
    trace_g: Mapping[str, np.ndarray], trace_x: Mapping[str, np.ndarray], weights
) -> float:
    """Sum over layers of ``weight * MSE(trace_g[l], trace_x[l])``.

    ``weights`` is a mapping layer id -> weight or a sequence aligned with the
    traces' key order.
    """
    if set(trace_g) != set(trace_x):
        raise ValueError(f"trace layers differ: {sorted(trace_g)} vs {sorted(trace_x)}")
    if not isinstance(weights, Mapping):
        weights = dict(zip(trace_g, weights))
        if len(weights) != len(trace_g):
            raise ValueError("one weight per traced layer required")
    total = 0.0
    for lid in trace_g:
        a = np.asarray(trace_g[lid], dtype=np.float64)
        b = np.asarray(trace_x[lid], dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(f"layer {lid!r}: shapes {a.shape} vs {b.shape}")
        total += weights[lid] * float(np.mean((a - b) ** 2))
    return total


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, x: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(x, dtype=np.float64), np.zeros_like(x, dtype=np.float64), 0)


def adam_step(
    state: AdamState,
    x: np.ndarray,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step; returns the new point and state."""
    if x.shape != grad.shape or state.m.shape != x.shape:
        raise ShapeError(f"adam shapes disagree: x {x.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient passed to adam_step")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return x - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def clip_values(x: np.ndarray, bounds, enabled: bool = True) -> np.ndarray:
    """Clamp into per-feature ``[lo, hi]`` when enabled; identity otherwise."""
    if not enabled:
        return x
    lo, hi = bounds
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("bounds have min > max for some feature")
    if lo.shape != hi.shape or x.shape[x.ndim - lo.ndim :] != lo.shape:
        raise ShapeError(f"bounds shape {lo.shape} does not match x {x.shape}")
    return np.minimum(np.maximum(x, lo), hi)


def init_noise(shape: Tuple[int, ...], seed: int, bounds) -> np.ndarray:
    """Standard Gaussian draw clamped to ``bounds`` (no clamp if bounds is None)."""
    x = np.random.default_rng(seed).standard_normal(shape)
    return x if bounds is None else clip_values(x, bounds, True)


def sample_seed(seed: int, sample_id: int) -> int:
    return derive_seed(seed, "interrogate", sample_id)


# --------------------------------------------------------------------------
# The loop
# --------------------------------------------------------------------------


@dataclass
class InterrogationResult:
    snapshots: Dict[int, np.ndarray]  # step -> (N, *input_shape)
    losses: np.ndarray  # (steps + 1, N): loss at x_g^(t) for t = 0..steps


def run_interrogation(
    model: Model,
    x: np.ndarray,
    cfg: InterrogationConfig,
    bounds,
    seeds: Sequence[int],
    checkpoints: Optional[Iterable[int]] = None,
    defense: Optional[Obfuscation] = None,
    defense_ids: Optional[Sequence[int]] = None,
) -> InterrogationResult:
    """Interrogate a batch of queries; each row is independent of the others.

    ``seeds`` gives one initialisation seed per row. ``checkpoints`` lists the
    step counts whose iterates are kept (default: only ``cfg.steps``). With a
    ``defense`` every exposed activation (query and synthetic) is obfuscated
    and the gradient flows through the normalisation.
    """
    spec = model.spec
    xb, _ = _as_batch(spec, x)
    n = len(xb)
    if len(seeds) != n:
        raise ValueError(f"{len(seeds)} seeds for {n} inputs")
    if cfg.clip and bounds is None:
        raise ValueError("clipping enabled but no bounds given")
    keep = sorted(set(checkpoints or (cfg.steps,)))
    if keep[0] < 1 or keep[-1] > cfg.steps:
        raise ValueError(f"checkpoints must lie in [1, {cfg.steps}]")
    ids, weights = cfg.resolve(model)
    idx = [spec.index(l) for l in ids]
    top = max(idx)

    noise_rngs = None
    if defense is not None:
        keys = range(n) if defense_ids is None else defense_ids
        noise_rngs = [np.random.default_rng(derive_seed(defense.seed, "obfuscate", int(k))) for k in keys]

    def expose(a):
        if defense is None:
            return a, None
        xhat, inv = normalize_rows(a, OBF_EPS)
        return obfuscate_batch(a, defense.sigma, noise_rngs), (xhat, inv)

    target_acts = run_forward(model, xb, upto=top)
    targets = [expose(target_acts[k + 1])[0] for k in idx]

    xg = np.stack([init_noise(spec.input_shape, int(s), bounds) for s in seeds])
    state = AdamState.zeros_like(xg)
    snaps: Dict[int, np.ndarray] = {}
    losses = np.zeros((cfg.steps + 1, n))

    def loss_and_grad(xg):
        acts = run_forward(model, xg, upto=top)
        upstream = {}
        loss = np.zeros(n)
        for k, h, w in zip(idx, targets, weights):
            e, aux = expose(acts[k + 1])
            diff = e - h
            size = diff[0].size
            loss += w * (diff * diff).reshape(n, -1).mean(axis=1)
            g = (2.0 * w / size) * diff
            if aux is not None:
                g = normalize_rows_backward(aux[0], aux[1], g)
            upstream[k] = upstream[k] + g if k in upstream else g
        grad, _ = run_backward(model, acts, upstream, want_params=False)
        return loss, grad

    for t in range(cfg.steps):
        try:
            loss, grad = loss_and_grad(xg)
            losses[t] = loss
            xg, state = adam_step(state, xg, grad, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        except NumericalError as exc:
            raise NumericalError(f"interrogation step {t}: {exc}") from None
        xg = clip_values(xg, bounds, cfg.clip)
        if t + 1 in keep:
            snaps[t + 1] = xg.copy()
    losses[cfg.steps], _ = loss_and_grad(xg)
    return InterrogationResult(snaps, losses)


def interrogate(model: Model, x: np.ndarray, cfg: InterrogationConfig, bounds, defense=None) -> np.ndarray:
    """Interrogation image x_g^(T) for a single query, initialised from ``cfg.seed``."""
    xb, single = _as_batch(model.spec, x)
    if not single:
        raise ShapeError("interrogate takes one input; use interrogate_batch for batches")
    res = run_interrogation(model, xb, cfg, bounds, [cfg.seed], defense=defense)
    return res.snapshots[cfg.steps][0]


def interrogate_batch(
    model: Model, x: np.ndarray, cfg: InterrogationConfig, bounds, sample_ids=None, defense=None
) -> np.ndarray:
    """Interrogate many queries; row i is seeded by ``sample_seed(cfg.seed, sample_ids[i])``."""
    xb, _ = _as_batch(model.spec, x)
    sample_ids = np.arange(len(xb)) if sample_ids is None else np.asarray(sample_ids)
    seeds = [sample_seed(cfg.seed, int(i)) for i in sample_ids]
    res = run_interrogation(model, xb, cfg, bounds, seeds, defense=defense, defense_ids=sample_ids)
    return res.snapshots[cfg.steps]
