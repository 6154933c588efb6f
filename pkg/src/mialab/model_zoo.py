"""Toy target architectures, traced forward passes and depth-based layer groups."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .tensor_core import (
    Conv2d,
    Dense,
    Flatten,
    Layer,
    MeanPool2d,
    Model,
    ModelSpec,
    ReLU,
    ShapeError,
    _as_batch,
    run_forward,
)

ARCHITECTURES = ("TinyMLP", "TinyCNN")
GROUP_NAMES = ("Early", "Mid", "Late", "All")

ActivationTrace = Dict[str, np.ndarray]


def tiny_mlp_spec(input_shape: Sequence[int], classes: int, hidden: int = 32) -> ModelSpec:
    d = int(np.prod(input_shape))
    layers: List[Tuple[str, Layer]] = []
    if len(input_shape) != 1:
        layers.append(("flatten", Flatten()))
    layers += [
        ("fc1", Dense(d, hidden)),
        ("relu1", ReLU()),
        ("fc2", Dense(hidden, hidden)),
        ("relu2", ReLU()),
        ("fc3", Dense(hidden, classes)),
    ]
    return ModelSpec(tuple(layers), tuple(input_shape), classes)


def tiny_cnn_spec(input_shape: Sequence[int], classes: int, width: int = 8, hidden: int = 32) -> ModelSpec:
    if len(input_shape) != 3:
        raise ShapeError(f"TinyCNN needs a (C, H, W) input, got {tuple(input_shape)}")
    c, h, w = input_shape
    if h != w or h < 8:
        raise ShapeError(f"TinyCNN needs a square input of at least 8x8, got {h}x{w}")
    if h % 4:
        raise ShapeError(f"TinyCNN needs H divisible by 4, got {h}")
    side = h // 4
    layers = (
        ("conv1", Conv2d(c, width, 3, 1, 1)),
        ("relu1", ReLU()),
        ("pool1", MeanPool2d(2)),
        ("conv2", Conv2d(width, 2 * width, 3, 1, 1)),
        ("relu2", ReLU()),
        ("pool2", MeanPool2d(2)),
        ("conv3", Conv2d(2 * width, 2 * width, 3, 1, 1)),
        ("relu3", ReLU()),
        ("flatten", Flatten()),
        ("fc1", Dense(2 * width * side * side, hidden)),
        ("relu4", ReLU()),
        ("fc2", Dense(hidden, classes)),
    )
    return ModelSpec(layers, tuple(input_shape), classes)


def init_model(spec: ModelSpec, seed: int) -> Model:
    """Fan-in scaled Gaussian initialisation, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for k, (lid, layer) in enumerate(spec.layers):
        params[lid] = layer.init_params(spec.in_shape(k), rng)
    return Model(spec, params)


def build_model(arch: str, input_shape: Sequence[int], classes: int, seed: int, **kwargs) -> Model:
    if classes < 2:
        raise ValueError("classes must be at least 2")
    if arch == "TinyMLP":
        spec = tiny_mlp_spec(input_shape, classes, **kwargs)
    elif arch == "TinyCNN":
        spec = tiny_cnn_spec(input_shape, classes, **kwargs)
    else:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    return init_model(spec, seed)


def forward_with_trace(
    model: Model, x: np.ndarray, capture: Iterable[str] = ()
) -> Tuple[np.ndarray, ActivationTrace]:
    """Logits plus the post-layer activations of the requested layers.

    Accepts a single input or a batch; trace entries mirror that.
    """
    spec = model.spec
    capture = list(capture)
    for lid in capture:
        if lid not in spec.layer_ids:
            raise KeyError(f"unknown layer id {lid!r}")
    xb, single = _as_batch(spec, x)
    acts = run_forward(model, xb)
    logits = acts[-1]
    trace = {}
    for lid in capture:
        a = acts[spec.index(lid) + 1]
        trace[lid] = a[0] if single else a
    return (logits[0] if single else logits), trace


@dataclass(frozen=True)
class LayerGroup:
    name: str
    members: Tuple[str, ...]


def layer_groups(spec: ModelSpec, overrides: Optional[Dict[str, Sequence[str]]] = None) -> List[LayerGroup]:
    """Split parametric layers by depth into Early/Mid/Late thirds plus All.

    With ``n = 3q + r`` parametric layers each group gets ``q``; a remainder of
    one goes to Late, a remainder of two to Mid and Late.
    """
    if isinstance(spec, Model):
        spec = spec.spec
    pids = list(spec.parametric_ids())
    n = len(pids)
    if n < 3:
        raise ValueError(f"layer grouping needs at least 3 parametric layers, got {n}")
    q, r = divmod(n, 3)
    sizes = [q, q + (r == 2), q + (r >= 1)]
    groups = []
    pos = 0
    for name, size in zip(GROUP_NAMES[:3], sizes):
        groups.append(LayerGroup(name, tuple(pids[pos : pos + size])))
        pos += size
    groups.append(LayerGroup("All", tuple(pids)))
    if overrides:
        ids = set(spec.layer_ids)
        by_name = {g.name: g for g in groups}
        for name, members in overrides.items():
            if name not in GROUP_NAMES:
                raise ValueError(f"unknown group {name!r}")
            bad = [m for m in members if m not in ids]
            if bad or not members:
                raise ValueError(f"group {name!r} has invalid members {list(members)}")
            by_name[name] = LayerGroup(name, tuple(members))
        groups = [by_name[n] for n in GROUP_NAMES]
    return groups


def group_by_name(spec: ModelSpec, name: str) -> LayerGroup:
    for g in layer_groups(spec):
        if g.name == name:
            return g
    raise KeyError(f"unknown layer group {name!r}")


def penultimate_index(spec: ModelSpec) -> int:
    """Index of the layer whose output feeds the final Dense layer."""
    last_id, last = spec.layers[-1]
    if not isinstance(last, Dense):
        raise ValueError("final layer must be Dense")
    return len(spec.layers) - 2
