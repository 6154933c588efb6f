"""Shared detector plumbing: per-sample gradients and the scoring interface."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..tensor_core import Model, _as_batch, flatten_grads, run_backward, run_forward, softmax_cross_entropy


class Detector:
    """A membership detector: higher score means more member-like.

    ``scores`` works on a batch; ``ids`` are stable sample identifiers used
    only to seed any per-sample randomness.
    """

    name = "?"

    def scores(self, model: Model, x: np.ndarray, y: np.ndarray, ids: Optional[Sequence[int]] = None) -> np.ndarray:
        raise NotImplementedError

    def score(self, model: Model, x: np.ndarray, y: int, sample_id: int = 0) -> float:
        xb, single = _as_batch(model.spec, x)
        if not single:
            raise ValueError("score takes one input; use scores for batches")
        return float(self.scores(model, xb, np.array([int(y)]), [sample_id])[0])


def per_sample_param_grads(model: Model, x: np.ndarray, y: np.ndarray, index_set=None) -> np.ndarray:
    """Rows of the flattened cross-entropy gradient w.r.t. all parameters.

    Computed one sample at a time so each row is an exact single-sample
    gradient. ``index_set`` gathers a fixed subset of coordinates.
    """
    xb, _ = _as_batch(model.spec, x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(y) != len(xb):
        raise ValueError("one label per input required")
    if index_set is not None:
        index_set = np.asarray(index_set, dtype=np.int64)
        if index_set.size and (index_set.min() < 0 or index_set.max() >= model.n_params):
            raise IndexError(f"gradient index out of range [0, {model.n_params})")
    width = model.n_params if index_set is None else len(index_set)
    out = np.empty((len(xb), width))
    last = len(model.spec.layers) - 1
    for i in range(len(xb)):
        acts = run_forward(model, xb[i : i + 1])
        _, g = softmax_cross_entropy(acts[-1], y[i : i + 1])
        _, grads = run_backward(model, acts, {last: g})
        flat = flatten_grads(model, grads)
        out[i] = flat if index_set is None else flat[index_set]
    return out


def grad_feature(model: Model, x: np.ndarray, y: int, index_set) -> np.ndarray:
    """Subsampled parameter gradient of the cross-entropy at one ``(x, y)``."""
    return per_sample_param_grads(model, x, np.array([y]), index_set)[0]


def input_grads(model: Model, x: np.ndarray, y: np.ndarray):
    """Per-sample cross-entropy, input gradient and logits for a batch."""
    acts = run_forward(model, x)
    loss, g = softmax_cross_entropy(acts[-1], y)
    gx, _ = run_backward(model, acts, {len(acts) - 2: g}, want_params=False)
    return loss, gx, acts[-1]
