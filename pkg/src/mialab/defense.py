"""Activation obfuscation: layer normalisation followed by additive Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .tensor_core import normalize_rows

OBF_EPS = 1e-12


@dataclass(frozen=True)
class Obfuscation:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")


def obfuscate_batch(acts: np.ndarray, sigma: float, rngs) -> np.ndarray:
    """Normalise each sample's activation tensor and add N(0, sigma^2) noise.

    ``rngs`` holds one generator per sample so the noise of a sample does not
    depend on what else is in the batch.
    """
    xhat, _ = normalize_rows(acts, OBF_EPS)
    if sigma == 0:
        return xhat
    noise = np.stack([r.standard_normal(acts.shape[1:]) for r in rngs])
    return xhat + sigma * noise


def obfuscate_trace(trace: Dict[str, np.ndarray], sigma: float, seed: int) -> Dict[str, np.ndarray]:
    """Obfuscate every tensor of a single-input trace (layer order = sorted ids)."""
    if not sigma >= 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    out = {}
    for lid in sorted(trace):
        a = np.asarray(trace[lid], dtype=np.float64)
        out[lid] = obfuscate_batch(a[None], sigma, [rng])[0]
    return out
