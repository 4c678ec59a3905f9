"""Gaussian variational family over the unconstrained AR-HMM globals."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import lgamma

import numpy as np

from .. import diffcore as dc
from ..arhmm import ARHMMParams, ARHMMTerms
from ..diffcore import Tensor
from ..transforms import CholeskyCovariance, StickBreaking

HALF_LOG_2PI_E = 0.5 * float(np.log(2.0 * np.pi * np.e))
HALF_LOG_2PI = 0.5 * float(np.log(2.0 * np.pi))


@dataclass
class GlobalVariationalParams:
    """``q(u) = N(mu, diag(exp(omega)^2))`` over the flattened unconstrained globals."""

    mu: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).copy()
        self.omega = np.asarray(self.omega, dtype=np.float64).copy()
        if self.mu.shape != self.omega.shape or self.mu.ndim != 1:
            raise ValueError(f"mu {self.mu.shape} and omega {self.omega.shape} must be equal-length vectors")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.omega))):
            raise ValueError("variational parameters must be finite")

    @property
    def size(self) -> int:
        return self.mu.size


def reparam_sample(mu, omega, eps) -> Tensor:
    """``mu + exp(omega) * eps``; differentiable in ``mu`` and ``omega``."""
    if isinstance(mu, GlobalVariationalParams):
        mu, omega = mu.mu, mu.omega
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != tuple(dc.as_tensor(mu).shape):
        raise ValueError(f"eps has shape {eps.shape}, expected {dc.as_tensor(mu).shape}")
    return dc.as_tensor(mu) + dc.exp(omega) * eps


def gaussian_entropy(omega):
    """Entropy of a diagonal Gaussian with log standard deviations ``omega``."""
    omega = dc.as_tensor(omega)
    return omega.sum() + HALF_LOG_2PI_E * omega.size


@dataclass
class GlobalLayout:
    """Block layout of the unconstrained global vector.

    Blocks, in order: initial distribution (K-1), transition rows (K(K-1)),
    lag matrices (K*D*rD), biases (K*D), Cholesky coordinates (K*D(D+1)/2).
    """

    num_states: int
    obs_dim: int
    ar_order: int
    blocks: dict = field(init=False)

    def __post_init__(self):
        K, D, r = self.num_states, self.obs_dim, self.ar_order
        if min(K, D, r) < 1:
            raise ValueError("num_states, obs_dim and ar_order must be positive")
        sizes = {
            "initial": K - 1,
            "transitions": K * (K - 1),
            "lag_matrices": K * D * r * D,
            "biases": K * D,
            "chol": K * D * (D + 1) // 2,
        }
        self.blocks = {}
        start = 0
        for name, n in sizes.items():
            self.blocks[name] = slice(start, start + n)
            start += n
        self.size = start
        self.cov_bijector = CholeskyCovariance(D)
        self.simplex = StickBreaking(K) if K > 1 else None

    def block_names(self) -> list[str]:
        return list(self.blocks)

    def pack(self, params: ARHMMParams) -> np.ndarray:
        """Map constrained parameters to the unconstrained vector."""
        K, D, r = self.num_states, self.obs_dim, self.ar_order
        if (params.num_states, params.obs_dim, params.ar_order) != (K, D, r):
            raise ValueError("parameter dimensions do not match the layout")
        parts = []
        if K > 1:
            parts.append(self.simplex.to_unconstrained(params.initial_dist))
            parts.append(self.simplex.to_unconstrained(params.transitions).ravel())
        parts.append(params.lag_matrices.ravel())
        parts.append(params.biases.ravel())
        parts.append(self.cov_bijector.to_unconstrained(params.covariances).ravel())
        return np.concatenate(parts)

    def unpack(self, u) -> tuple[ARHMMTerms, Tensor, Tensor, dict]:
        """Map an unconstrained vector to model terms.

        Returns ``(terms, logdet, prior_logprob, constrained)``. ``logdet`` is
        the log-Jacobian of the inverse map; ``prior_logprob`` is the prior
        density of the constrained parameters: Dirichlet(1) on the initial
        distribution and every transition row, N(0, 1) on lag and bias entries,
        and the covariance density induced by N(0, 1) on its Cholesky
        coordinates. ``constrained`` holds the initial distribution,
        transitions and covariances as tensors.
        """
        u = dc.as_tensor(u)
        if u.shape != (self.size,):
            raise ValueError(f"expected unconstrained vector of length {self.size}, got {u.shape}")
        K, D, r = self.num_states, self.obs_dim, self.ar_order
        b = self.blocks
        if K > 1:
            init, ld_init = self.simplex.from_unconstrained(u[b["initial"]])
            trans, ld_trans = self.simplex.from_unconstrained(u[b["transitions"]].reshape(K, K - 1))
            log_init = dc.log(init)
            log_trans = dc.log(trans)
            logdet = ld_init + ld_trans.sum()
            prior = Tensor((K + 1) * lgamma(K))
        else:
            init = Tensor(np.ones(1))
            trans = Tensor(np.ones((1, 1)))
            log_init = Tensor(np.zeros(1))
            log_trans = Tensor(np.zeros((1, 1)))
            logdet = Tensor(0.0)
            prior = Tensor(0.0)
        lags = u[b["lag_matrices"]].reshape(K, D, r * D)
        biases = u[b["biases"]].reshape(K, D)
        chol_u = u[b["chol"]].reshape(K, -1)
        L, log_diag, ld_cov = self.cov_bijector.factor(chol_u)
        n_gauss = b["lag_matrices"].stop - b["lag_matrices"].start + b["biases"].stop - b["biases"].start
        gauss = -0.5 * (dc.square(u[b["lag_matrices"].start : b["biases"].stop]).sum()) - HALF_LOG_2PI * n_gauss
        chol_std = -0.5 * dc.square(chol_u).sum() - HALF_LOG_2PI * chol_u.size
        ld_cov_total = ld_cov.sum()
        logdet = logdet + ld_cov_total
        prior = prior + gauss + chol_std - ld_cov_total
        terms = ARHMMTerms(log_init, log_trans, lags, biases, L, log_diag)
        return terms, logdet, prior, {"initial": init, "transitions": trans, "chol": L}

    def to_params(self, u) -> ARHMMParams:
        """Constrained point estimate ``T^-1(u)``."""
        terms, _, _, con = self.unpack(np.asarray(dc.value_of(u)))
        L = con["chol"].value
        init = con["initial"].value
        trans = con["transitions"].value
        return ARHMMParams(
            init / init.sum(),
            trans / trans.sum(axis=1, keepdims=True),
            terms.lag_matrices.value.copy(),
            terms.biases.value.copy(),
            L @ np.swapaxes(L, -1, -2),
        )
