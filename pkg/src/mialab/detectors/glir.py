"""Gradient likelihood-ratio detector.

Member and non-member gradient features are modelled as Gaussians with
means mu1 / mu0 and a shared covariance. The log-likelihood ratio is affine
in the feature: ``(g - (mu0 + mu1) / 2) . w`` with ``w = Sigma^-1 (mu1 - mu0)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from ..tensor_core import Model
from .base import Detector, per_sample_param_grads

DEFAULT_D_SUB = 5000


class SingularCovariance(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GlirModel:
    mu0: np.ndarray
    mu1: np.ndarray
    w: np.ndarray
    tau: float
    index_set: np.ndarray
    # Low-rank factor of the pooled sample covariance, S = Z^T Z / dof.
    z: np.ndarray
    dof: int

    @property
    def dim(self) -> int:
        return len(self.mu0)

    def solve(self, v: np.ndarray) -> np.ndarray:
        """Sigma^-1 v for Sigma = S + tau I (v may be (d,) or (d, k))."""
        return _solve(self.z, self.dof, self.tau, v)


def _solve(z: np.ndarray, dof: int, tau: float, v: np.ndarray) -> np.ndarray:
    n, d = z.shape
    if d <= n or tau == 0:
        sigma = z.T @ z / dof + tau * np.eye(d)
        try:
            c = linalg.cho_factor(sigma, lower=True)
        except linalg.LinAlgError:
            cond = np.linalg.cond(sigma)
            raise SingularCovariance(f"covariance not positive definite (condition ~ {cond:.3g})") from None
        return linalg.cho_solve(c, v)
    # Woodbury: (tau I + Z^T Z / dof)^-1 = (I - Z^T (tau dof I + Z Z^T)^-1 Z) / tau
    inner = linalg.cho_factor(tau * dof * np.eye(n) + z @ z.T, lower=True)
    return (v - z.T @ linalg.cho_solve(inner, z @ v)) / tau


def glir_fit_features(
    members: np.ndarray, nonmembers: np.ndarray, tau: Optional[float] = None, index_set=None
) -> GlirModel:
    """Fit means and the ridge-regularised pooled covariance from feature rows."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    nonmembers = np.atleast_2d(np.asarray(nonmembers, dtype=np.float64))
    if len(members) == 0 or len(nonmembers) == 0:
        raise ValueError("both calibration sets must be non-empty")
    if members.shape[1] != nonmembers.shape[1]:
        raise ValueError("feature widths differ")
    mu1 = members.mean(axis=0)
    mu0 = nonmembers.mean(axis=0)
    z = np.vstack([members - mu1, nonmembers - mu0])
    dof = max(len(z) - 2, 1)
    d = z.shape[1]
    if tau is None:
        tau = 1e-3 * float((z * z).sum()) / dof / d
        if tau == 0:
            tau = 1e-12
    if tau < 0:
        raise ValueError("ridge tau must be non-negative")
    if tau == 0 and len(z) - 2 < d:
        raise SingularCovariance(
            f"covariance rank <= {max(len(z) - 2, 0)} < dimension {d} with tau=0 (condition ~ inf)"
        )
    w = _solve(z, dof, tau, mu1 - mu0)
    idx = np.arange(d) if index_set is None else np.asarray(index_set, dtype=np.int64)
    return GlirModel(mu0, mu1, w, float(tau), idx, z, dof)


def choose_index_set(n_params: int, d_sub: int, seed: int) -> np.ndarray:
    d_sub = min(int(d_sub), n_params)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_params, size=d_sub, replace=False))


def glir_fit(
    model: Model,
    calib_members,
    calib_nonmembers,
    d_sub: int = DEFAULT_D_SUB,
    tau: Optional[float] = None,
    seed: int = 0,
) -> GlirModel:
    """``calib_*`` are ``(x, y)`` batches taken from the attack-validation split."""
    idx = choose_index_set(model.n_params, d_sub, seed)
    gm = per_sample_param_grads(model, calib_members[0], calib_members[1], idx)
    gn = per_sample_param_grads(model, calib_nonmembers[0], calib_nonmembers[1], idx)
    return glir_fit_features(gm, gn, tau, idx)


def glir_score(glir: GlirModel, g: np.ndarray) -> np.ndarray:
    """Log-likelihood ratio for one feature vector or a batch of rows."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1] != glir.dim:
        raise ValueError(f"feature length {g.shape[-1]} != {glir.dim}")
    return (g - 0.5 * (glir.mu0 + glir.mu1)) @ glir.w


def glir_score_chi2(glir: GlirModel, g: np.ndarray) -> np.ndarray:
    """Experimental: log-ratio of normal approximations to the Mahalanobis statistics.

    Under hypothesis k the squared Mahalanobis distance to mu_k is chi^2 with
    d degrees of freedom; each is approximated by N(d, 2d).
    """
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    d = glir.dim
    q = []
    for mu in (glir.mu0, glir.mu1):
        r = g - mu
        q.append(np.einsum("nd,dn->n", r, glir.solve(r.T)))
    q0, q1 = q
    return ((q0 - d) ** 2 - (q1 - d) ** 2) / (4.0 * d)


class GlirDetector(Detector):
    name = "GLiR"

    def __init__(self, glir: GlirModel, mode: str = "closed_form"):
        if mode not in ("closed_form", "chi2"):
            raise ValueError(f"unknown GLiR mode {mode!r}")
        self.glir = glir
        self.mode = mode

    @classmethod
    def fit(cls, model: Model, members, nonmembers, d_sub=DEFAULT_D_SUB, tau=None, seed=0, mode="closed_form"):
        return cls(glir_fit(model, members, nonmembers, d_sub, tau, seed), mode)

    def scores(self, model, x, y, ids=None):
        feats = per_sample_param_grads(model, x, y, self.glir.index_set)
        if self.mode == "chi2":
            return glir_score_chi2(self.glir, feats)
        return glir_score(self.glir, feats)
