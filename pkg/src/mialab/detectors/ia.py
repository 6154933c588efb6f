"""Shadow-model meta-classifier on penultimate-layer features (IA detector)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..defense import Obfuscation, obfuscate_batch
from ..interrogation import AdamState, adam_step
from ..model_zoo import penultimate_index
from ..seeds import derive_seed
from ..tensor_core import Dense, Model, ModelSpec, ReLU, _as_batch, run_backward, run_forward, softmax
from .base import Detector


def ia_features(model: Model, x, y, defense: Optional[Obfuscation] = None, ids=None) -> np.ndarray:
    """Rows of ``[a, dloss/da, a * W[y]]`` for penultimate activation ``a``.

    With a ``defense`` the activation is obfuscated first and the other two
    blocks are computed from the obfuscated value.
    """
    xb, _ = _as_batch(model.spec, x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    k = penultimate_index(model.spec)
    acts = run_forward(model, xb, upto=k) if k >= 0 else [xb]
    a = acts[-1].reshape(len(xb), -1)
    if defense is not None:
        keys = range(len(xb)) if ids is None else ids
        rngs = [np.random.default_rng(derive_seed(defense.seed, "obfuscate-ia", int(i))) for i in keys]
        a = obfuscate_batch(a, defense.sigma, rngs)
    last_id = model.spec.layers[-1][0]
    w = model.params[last_id]["weight"]
    b = model.params[last_id]["bias"]
    p = softmax(a @ w.T + b)
    p[np.arange(len(y)), y] -= 1.0
    grad_a = p @ w
    ia = a * w[y]
    return np.hstack([a, grad_a, ia])


def ia_component(activation: np.ndarray, final_weight: np.ndarray, y: int) -> np.ndarray:
    """Elementwise contribution of the activation to the true-class logit."""
    return np.asarray(activation) * np.asarray(final_weight)[int(y)]


@dataclass(frozen=True)
class MetaConfig:
    hidden: int = 64
    lr: float = 1e-3
    lr_final: float = 1e-4
    batch_size: int = 128
    patience: int = 5
    max_epochs: int = 30
    seed: int = 0


@dataclass
class ShadowData:
    """A trained shadow model and labelled member/non-member queries for it."""

    model: Model
    x: np.ndarray
    y: np.ndarray
    is_member: np.ndarray


@dataclass
class MetaClassifier:
    net: Model  # single-logit MLP
    mean: np.ndarray
    std: np.ndarray
    target_spec: ModelSpec
    history: list

    def prob(self, feats: np.ndarray) -> np.ndarray:
        if feats.shape[1] != len(self.mean):
            raise ValueError(f"feature width {feats.shape[1]} != meta input {len(self.mean)}")
        z = run_forward(self.net, (feats - self.mean) / self.std)[-1][:, 0]
        return 1.0 / (1.0 + np.exp(-z))


def _meta_net(width: int, hidden: int, seed: int) -> Model:
    spec = ModelSpec((("fc1", Dense(width, hidden)), ("relu", ReLU()), ("out", Dense(hidden, 1))), (width,), 1)
    rng = np.random.default_rng(seed)
    params = {lid: layer.init_params(spec.in_shape(k), rng) for k, (lid, layer) in enumerate(spec.layers)}
    return Model(spec, params)


def _bce(net: Model, x: np.ndarray, t: np.ndarray):
    acts = run_forward(net, x)
    z = acts[-1][:, 0]
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean()), acts, (1.0 / (1.0 + np.exp(-z)) - t) / len(t)


def ia_fit(shadows: Sequence[ShadowData], cfg: MetaConfig = MetaConfig(), target_spec: Optional[ModelSpec] = None,
           defense: Optional[Obfuscation] = None) -> MetaClassifier:
    """Train the meta-classifier; the last shadow is held out for early stopping."""
    if len(shadows) < 2:
        raise ValueError("need at least two shadows (one is held out for validation)")
    spec = target_spec or shadows[0].model.spec
    for s in shadows:
        if s.model.spec != spec:
            raise ValueError("shadow architecture differs from the target")

    def feats(group):
        xs = [ia_features(s.model, s.x, s.y, defense, ids=np.arange(len(s.y)) + 100_000 * j) for j, s in group]
        return np.vstack(xs), np.concatenate([s.is_member.astype(float) for _, s in group])

    indexed = list(enumerate(shadows))
    xtr, ttr = feats(indexed[:-1])
    xva, tva = feats(indexed[-1:])
    mean = xtr.mean(axis=0)
    std = xtr.std(axis=0)
    std[std == 0] = 1.0
    xtr = (xtr - mean) / std
    xva = (xva - mean) / std

    net = _meta_net(xtr.shape[1], cfg.hidden, cfg.seed)
    rng = np.random.default_rng(derive_seed(cfg.seed, "meta-batches"))
    states = {l: {n: AdamState.zeros_like(a) for n, a in p.items()} for l, p in net.params.items()}
    best, best_loss, since = net.copy(), np.inf, 0
    history = []
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(cfg.max_epochs - 1, 1))
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr * decay**epoch
        order = rng.permutation(len(ttr))
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            _, acts, g = _bce(net, xtr[b], ttr[b])
            _, grads = run_backward(net, acts, {len(acts) - 2: g[:, None]})
            for lid, p in net.params.items():
                for name in p:
                    p[name], states[lid][name] = adam_step(states[lid][name], p[name], grads[lid][name], lr)
        val_loss = _bce(net, xva, tva)[0]
        history.append({"epoch": epoch, "lr": lr, "val_loss": val_loss})
        if val_loss < best_loss:
            best, best_loss, since = net.copy(), val_loss, 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    return MetaClassifier(best, mean, std, spec, history)


class IaDetector(Detector):
    name = "IA"

    def __init__(self, meta: MetaClassifier, defense: Optional[Obfuscation] = None):
        self.meta = meta
        self.defense = defense

    def scores(self, model, x, y, ids=None):
        if model.spec != self.meta.target_spec:
            raise ValueError("meta-classifier was fitted for a different architecture")
        return self.meta.prob(ia_features(model, x, y, self.defense, ids))


def ia_score(meta: MetaClassifier, model: Model, x, y) -> float:
    return IaDetector(meta).score(model, x, y)
