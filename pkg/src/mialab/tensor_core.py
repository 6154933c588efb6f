"""Dense float64 layer engine with exact forward and reverse-mode backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every layer works
on a batch: the leading axis is the sample axis and the remaining axes follow
the layer's shape contract. There is no general graph; a model is a fixed
stack of layers and gradients flow back through it in reverse order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Shape = Tuple[int, ...]
Params = Dict[str, np.ndarray]

LN_EPS = 1e-5


class ShapeError(ValueError):
    """Input or parameter shape does not match a layer contract."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared during a computation."""


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Convert ``data`` to a finite float64 array, optionally reshaped."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"data length {arr.size} != product of shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericalError("tensor contains NaN or Inf")
    return arr


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {where}")


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class Layer:
    """Base class. Subclasses are immutable descriptions; parameters live outside."""

    tag: int = -1

    def out_shape(self, in_shape: Shape) -> Shape:
        raise NotImplementedError

    def param_shapes(self, in_shape: Shape) -> Dict[str, Shape]:
        return {}

    def init_params(self, in_shape: Shape, rng: np.random.Generator) -> Params:
        return {}

    def forward(self, params: Params, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(
        self, params: Params, x: np.ndarray, out: np.ndarray, grad_out: np.ndarray
    ) -> Tuple[np.ndarray, Params]:
        raise NotImplementedError

    def extents(self) -> Tuple[int, ...]:
        return ()

    @property
    def parametric(self) -> bool:
        return False


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int
    out_features: int
    tag = 0

    def __post_init__(self):
        if self.in_features <= 0 or self.out_features <= 0:
            raise ShapeError(f"Dense extents must be positive: {self}")

    @property
    def parametric(self) -> bool:
        return True

    def extents(self):
        return (self.in_features, self.out_features)

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"Dense expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def param_shapes(self, in_shape):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def init_params(self, in_shape, rng):
        scale = np.sqrt(2.0 / self.in_features)
        return {
            "weight": rng.standard_normal((self.out_features, self.in_features)) * scale,
            "bias": np.zeros(self.out_features),
        }

    def forward(self, params, x):
        return x @ params["weight"].T + params["bias"]

    def backward(self, params, x, out, grad_out):
        grad_x = grad_out @ params["weight"]
        return grad_x, {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}


@dataclass(frozen=True)
class Conv2d(Layer):
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    tag = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) <= 0 or self.pad < 0:
            raise ShapeError(f"Conv2d extents must be positive: {self}")

    @property
    def parametric(self) -> bool:
        return True

    def extents(self):
        return (self.in_channels, self.out_channels, self.kernel, self.stride, self.pad)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(
                f"Conv2d expects ({self.in_channels}, H, W), got {tuple(in_shape)}"
            )
        _, h, w = in_shape
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        if self.kernel > hp or self.kernel > wp:
            raise ShapeError(f"kernel {self.kernel} does not fit padded input {hp}x{wp}")
        return (
            self.out_channels,
            (hp - self.kernel) // self.stride + 1,
            (wp - self.kernel) // self.stride + 1,
        )

    def param_shapes(self, in_shape):
        k = self.kernel
        return {"weight": (self.out_channels, self.in_channels, k, k), "bias": (self.out_channels,)}

    def init_params(self, in_shape, rng):
        fan_in = self.in_channels * self.kernel * self.kernel
        shape = self.param_shapes(in_shape)["weight"]
        return {
            "weight": rng.standard_normal(shape) * np.sqrt(2.0 / fan_in),
            "bias": np.zeros(self.out_channels),
        }

    def _padded(self, x):
        if self.pad == 0:
            return x
        p = self.pad
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def _cols(self, xp):
        """Patch matrix (N, Ho, Wo, C*k*k) gathered from the padded input."""
        s = self.stride
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo, k, _ = win.shape
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)

    def forward(self, params, x):
        cols = self._cols(self._padded(x))
        w = params["weight"].reshape(self.out_channels, -1)
        out = cols @ w.T + params["bias"]
        return out.transpose(0, 3, 1, 2)

    def backward(self, params, x, out, grad_out):
        xp = self._padded(x)
        cols = self._cols(xp)
        n, ho, wo, ckk = cols.shape
        g = grad_out.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        w = params["weight"]
        grad_w = (g.T @ cols.reshape(-1, ckk)).reshape(w.shape)
        grad_b = g.sum(axis=0)
        k, s, c = self.kernel, self.stride, self.in_channels
        gcols = (g @ w.reshape(self.out_channels, -1)).reshape(n, ho, wo, c, k, k)
        gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # (N, C, k, k, Ho, Wo)
        grad_xp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                grad_xp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, i, j]
        p = self.pad
        grad_x = grad_xp[:, :, p : xp.shape[2] - p, p : xp.shape[3] - p] if p else grad_xp
        return grad_x, {"weight": grad_w, "bias": grad_b}


@dataclass(frozen=True)
class ReLU(Layer):
    tag = 2

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, params, x):
        return np.maximum(x, 0.0)

    def backward(self, params, x, out, grad_out):
        return grad_out * (x > 0), {}


@dataclass(frozen=True)
class Flatten(Layer):
    tag = 3

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, params, x, out, grad_out):
        return grad_out.reshape(x.shape), {}


@dataclass(frozen=True)
class MeanPool2d(Layer):
    kernel: int
    tag = 4

    def __post_init__(self):
        if self.kernel <= 0:
            raise ShapeError("MeanPool2d kernel must be positive")

    def extents(self):
        return (self.kernel,)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"MeanPool2d expects (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        k = self.kernel
        if h % k or w % k:
            raise ShapeError(f"MeanPool2d({k}) needs H, W divisible by {k}, got {h}x{w}")
        return (c, h // k, w // k)

    def forward(self, params, x):
        k = self.kernel
        out = x[:, :, ::k, ::k].copy()
        for i in range(k):
            for j in range(k):
                if i or j:
                    out += x[:, :, i::k, j::k]
        return out / (k * k)

    def backward(self, params, x, out, grad_out):
        k = self.kernel
        g = np.repeat(np.repeat(grad_out, k, axis=2), k, axis=3) / (k * k)
        return g, {}


def normalize_rows(x: np.ndarray, eps: float = LN_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-mean, unit-variance normalisation over all non-batch axes.

    Returns the normalised array and the per-sample ``1/sqrt(var + eps)``.
    """
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    return xc * inv, inv


def normalize_rows_backward(xhat: np.ndarray, inv: np.ndarray, grad: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, xhat.ndim))
    gm = grad.mean(axis=axes, keepdims=True)
    gxm = (grad * xhat).mean(axis=axes, keepdims=True)
    return inv * (grad - gm - xhat * gxm)


@dataclass(frozen=True)
class LayerNorm(Layer):
    dim: int
    tag = 5

    def __post_init__(self):
        if self.dim <= 0:
            raise ShapeError("LayerNorm dim must be positive")

    @property
    def parametric(self) -> bool:
        return True

    def extents(self):
        return (self.dim,)

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.dim,):
            raise ShapeError(f"LayerNorm expects ({self.dim},), got {tuple(in_shape)}")
        return (self.dim,)

    def param_shapes(self, in_shape):
        return {"gain": (self.dim,), "bias": (self.dim,)}

    def init_params(self, in_shape, rng):
        return {"gain": np.ones(self.dim), "bias": np.zeros(self.dim)}

    def forward(self, params, x):
        xhat, _ = normalize_rows(x)
        return xhat * params["gain"] + params["bias"]

    def backward(self, params, x, out, grad_out):
        xhat, inv = normalize_rows(x)
        grad_x = normalize_rows_backward(xhat, inv, grad_out * params["gain"])
        return grad_x, {"gain": (grad_out * xhat).sum(axis=0), "bias": grad_out.sum(axis=0)}


LAYER_KINDS = {cls.tag: cls for cls in (Dense, Conv2d, ReLU, Flatten, MeanPool2d, LayerNorm)}


def _check_params(layer: Layer, params: Params, in_shape: Shape, layer_id: str) -> None:
    expected = layer.param_shapes(in_shape)
    if set(expected) != set(params):
        raise ShapeError(f"layer {layer_id!r}: expected params {sorted(expected)}, got {sorted(params)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(
                f"layer {layer_id!r}: param {name} expected {shape}, got {params[name].shape}"
            )


def apply_layer(layer: Layer, params: Params, x: np.ndarray, layer_id: str = "?") -> np.ndarray:
    """Apply one layer to a single (unbatched) input tensor."""
    x = np.asarray(x, dtype=np.float64)
    try:
        out_shape = layer.out_shape(x.shape)
    except ShapeError as exc:
        raise ShapeError(f"layer {layer_id!r}: {exc}") from None
    _check_params(layer, params, x.shape, layer_id)
    out = layer.forward(params, x[None])[0]
    assert out.shape == out_shape
    return out


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its gradient w.r.t. the logits.

    ``logits`` is (N, C) and ``y`` holds N integer labels. The returned
    gradient is per sample (not averaged).
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(y))
    loss = lse - z[rows, y]
    grad = np.exp(z - lse[:, None])
    grad[rows, y] -= 1.0
    return loss, grad


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------


def finite_diff_oracle(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"f is non-finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def richardson_diff_oracle(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences at ``h`` and ``h/2`` combined to cancel the h^2 error term.

    Useful when the gradient is small relative to ``f`` so that a single
    small step drowns in round-off.
    """
    return (4.0 * finite_diff_oracle(f, x, h / 2) - finite_diff_oracle(f, x, h)) / 3.0


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


# --------------------------------------------------------------------------
# Layer stacks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Ordered ``(layer_id, layer)`` pairs plus the input shape and class count."""

    layers: Tuple[Tuple[str, Layer], ...]
    input_shape: Shape
    classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((str(i), l) for i, l in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        ids = [i for i, _ in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"layer ids must be unique: {ids}")
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if self.classes < 1:
            raise ValueError("classes must be positive")
        shape = self.input_shape
        shapes = []
        for lid, layer in self.layers:
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {lid!r}: {exc}") from None
            shapes.append(shape)
        if shape != (self.classes,):
            raise ShapeError(f"final output shape {shape} != ({self.classes},)")
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def layer_ids(self) -> Tuple[str, ...]:
        return tuple(i for i, _ in self.layers)

    @property
    def out_shapes(self) -> Tuple[Shape, ...]:
        return self._shapes

    def in_shape(self, index: int) -> Shape:
        return self.input_shape if index == 0 else self._shapes[index - 1]

    def index(self, layer_id: str) -> int:
        try:
            return self.layer_ids.index(layer_id)
        except ValueError:
            raise KeyError(f"unknown layer id {layer_id!r}") from None

    def parametric_ids(self) -> Tuple[str, ...]:
        return tuple(i for i, l in self.layers if l.parametric)


@dataclass
class Model:
    """A ModelSpec together with its parameters, keyed by layer id."""

    spec: ModelSpec
    params: Dict[str, Params]

    def __post_init__(self):
        for k, (lid, layer) in enumerate(self.spec.layers):
            self.params.setdefault(lid, {})
            _check_params(layer, self.params[lid], self.spec.in_shape(k), lid)

    def param_layout(self):
        """``[(layer_id, name, shape), ...]`` in declaration order."""
        out = []
        for k, (lid, layer) in enumerate(self.spec.layers):
            for name, shape in layer.param_shapes(self.spec.in_shape(k)).items():
                out.append((lid, name, shape))
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, _, s in self.param_layout())

    def flat_params(self) -> np.ndarray:
        parts = [self.params[lid][name].ravel() for lid, name, _ in self.param_layout()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_flat_params(self, flat: np.ndarray) -> "Model":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {flat.shape}")
        params: Dict[str, Params] = {lid: {} for lid in self.spec.layer_ids}
        pos = 0
        for lid, name, shape in self.param_layout():
            size = int(np.prod(shape))
            params[lid][name] = flat[pos : pos + size].reshape(shape).copy()
            pos += size
        return Model(self.spec, params)

    def copy(self) -> "Model":
        return Model(self.spec, {l: {n: a.copy() for n, a in p.items()} for l, p in self.params.items()})


def flatten_grads(model: Model, grads: Dict[str, Params]) -> np.ndarray:
    parts = [grads[lid][name].ravel() for lid, name, _ in model.param_layout()]
    return np.concatenate(parts) if parts else np.zeros(0)


def _as_batch(spec: ModelSpec, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None], True
    if x.shape[1:] == spec.input_shape:
        return x, False
    raise ShapeError(f"input shape {x.shape} does not match model input {spec.input_shape}")


def run_forward(model: Model, x: np.ndarray, upto: Optional[int] = None) -> list:
    """Batched forward pass returning ``[x, a_1, ..., a_k]`` (all activations)."""
    acts = [x]
    layers = model.spec.layers if upto is None else model.spec.layers[: upto + 1]
    for lid, layer in layers:
        acts.append(layer.forward(model.params[lid], acts[-1]))
    return acts


def run_backward(
    model: Model,
    acts: list,
    upstream: Dict[int, np.ndarray],
    want_params: bool = True,
) -> Tuple[np.ndarray, Dict[str, Params]]:
    """Reverse pass from gradient injections at one or more layer outputs.

    ``upstream`` maps layer index to d(scalar)/d(output of that layer), batched.
    Activations above the deepest injection point are never touched.
    """
    if not upstream:
        raise ValueError("no upstream gradients given")
    top = max(upstream)
    grad = None
    grads: Dict[str, Params] = {}
    for k in range(top, -1, -1):
        lid, layer = model.spec.layers[k]
        if k in upstream:
            grad = upstream[k] if grad is None else grad + upstream[k]
        grad_in, gp = layer.backward(model.params[lid], acts[k], acts[k + 1], grad)
        if not np.all(np.isfinite(grad_in)):
            raise NumericalError(f"non-finite gradient at layer {lid!r}")
        if want_params:
            grads[lid] = gp
        grad = grad_in
    if want_params:
        for k in range(top + 1, len(model.spec.layers)):
            lid = model.spec.layers[k][0]
            grads[lid] = {n: np.zeros_like(a) for n, a in model.params[lid].items()}
        for lid in model.spec.layer_ids:
            grads.setdefault(lid, {})
    return grad, grads


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for a single input or a batch."""
    xb, single = _as_batch(model.spec, x)
    out = run_forward(model, xb)[-1]
    return out[0] if single else out


def backprop(
    model: Model, x: np.ndarray, upstream: np.ndarray, cut: Optional[str] = None
) -> Tuple[np.ndarray, Dict[str, Params]]:
    """Exact input and parameter gradients of ``<upstream, output at cut>``.

    ``cut`` names the layer whose output receives ``upstream``; it defaults
    to the final (logit) layer. Works on one input or a batch.
    """
    spec = model.spec
    xb, single = _as_batch(spec, x)
    k = len(spec.layers) - 1 if cut is None else spec.index(cut)
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = up[None]
    if up.shape != (xb.shape[0],) + spec.out_shapes[k]:
        raise ShapeError(
            f"upstream shape {up.shape[1:] if single else up.shape} does not match "
            f"output of layer {spec.layers[k][0]!r} {spec.out_shapes[k]}"
        )
    acts = run_forward(model, xb, upto=k)
    for j in range(1, len(acts)):
        if not np.all(np.isfinite(acts[j])):
            raise NumericalError(f"non-finite activation at layer {spec.layers[j - 1][0]!r}")
    grad_x, grads = run_backward(model, acts, {k: up})
    return (grad_x[0] if single else grad_x), grads
