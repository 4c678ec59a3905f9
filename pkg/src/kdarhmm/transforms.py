"""Bijections between constrained parameter domains and unconstrained reals.

Each bijector maps a constrained value to an unconstrained vector
(``to_unconstrained``) and back (``from_unconstrained``). The inverse direction
also returns ``log|det J|`` of the unconstrained-to-constrained map, which is
the volume correction the variational objective needs. ``from_unconstrained``
is written against :mod:`kdarhmm.diffcore`, so it is differentiable when the
input is bound to a tape and a plain numeric evaluation otherwise. Leading
batch dimensions are allowed on both directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class Bijector:
    """Base class; ``dims`` describes a single (non-batched) event."""

    dims: int

    kind = "abstract"

    @property
    def unconstrained_size(self) -> int:
        raise NotImplementedError

    def to_unconstrained(self, constrained) -> np.ndarray:
        raise NotImplementedError

    def from_unconstrained(self, u) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def _check_last_dim(self, u):
        if u.shape[-1] != self.unconstrained_size:
            raise ValueError(
                f"{self.kind}: expected trailing dimension {self.unconstrained_size}, got shape {u.shape}"
            )


@dataclass(frozen=True)
class Identity(Bijector):
    kind = "identity"

    @property
    def unconstrained_size(self) -> int:
        return self.dims

    def to_unconstrained(self, constrained) -> np.ndarray:
        x = np.asarray(constrained, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("identity: non-finite input")
        return x.copy()

    def from_unconstrained(self, u):
        u = dc.as_tensor(u)
        self._check_last_dim(u)
        return u, Tensor(np.zeros(u.shape[:-1]))


@dataclass(frozen=True)
class StickBreaking(Bijector):
    """Simplex of size ``dims`` (K) <-> R^(K-1).

    Stick k (0-based) takes the fraction ``sigmoid(u_k + log(1/(K-1-k)))`` of
    what remains; the offset centers the map so that ``u = 0`` is the uniform
    simplex.
    """

    kind = "simplex_stickbreaking"

    def __post_init__(self):
        if self.dims < 2:
            raise ValueError("simplex bijector needs at least 2 categories")

    @property
    def unconstrained_size(self) -> int:
        return self.dims - 1

    @property
    def offsets(self) -> np.ndarray:
        K = self.dims
        return -np.log(K - 1 - np.arange(K - 1, dtype=np.float64))

    def to_unconstrained(self, constrained) -> np.ndarray:
        x = np.asarray(constrained, dtype=np.float64)
        if x.shape[-1] != self.dims:
            raise ValueError(f"simplex: expected trailing dimension {self.dims}, got shape {x.shape}")
        if np.any(~np.isfinite(x)) or np.any(x <= 0):
            raise ValueError("simplex: entries must be finite and strictly positive")
        if np.any(np.abs(x.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
            raise ValueError("simplex: entries must sum to 1")
        head = x[..., :-1]
        remaining = 1.0 - np.concatenate(
            [np.zeros(x.shape[:-1] + (1,)), np.cumsum(head, axis=-1)[..., :-1]], axis=-1
        )
        # log(z) - log(1 - z) with z = head / remaining, formed without cancellation
        logit = np.log(head) - np.log(remaining - head)
        return logit - self.offsets

    def from_unconstrained(self, u):
        u = dc.as_tensor(u)
        self._check_last_dim(u)
        y = u + self.offsets
        log_z = dc.log_sigmoid(y)
        log_1mz = -dc.softplus(y)
        # log of the stick remaining before piece k, k = 0..K-1
        csum = dc.cumsum(log_1mz, axis=-1)
        zeros = Tensor(np.zeros(u.shape[:-1] + (1,)))
        log_rem = dc.concat([zeros, csum], axis=-1)
        log_pieces = dc.concat([log_z + log_rem[..., :-1], log_rem[..., -1:]], axis=-1)
        x = dc.exp(log_pieces)
        logdet = (log_z + log_1mz + log_rem[..., :-1]).sum(axis=-1)
        return x, logdet


def tril_indices(D: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major lower-triangle order: (0,0), (1,0), (1,1), (2,0), ..."""
    return np.tril_indices(D)


@dataclass(frozen=True)
class CholeskyCovariance(Bijector):
    """D x D symmetric positive-definite matrix <-> R^(D(D+1)/2).

    The vector fills the lower triangle of ``L`` row by row, the diagonal
    passes through ``exp`` and the covariance is ``L L^T``. The Jacobian is
    taken with respect to the lower-triangular coordinates of the covariance.
    """

    kind = "cholesky_cov"

    @property
    def unconstrained_size(self) -> int:
        return self.dims * (self.dims + 1) // 2

    def _layout(self):
        D = self.dims
        rows, cols = tril_indices(D)
        diag_pos = np.flatnonzero(rows == cols)
        # exponent (D - i + 1) on log L_ii for 0-based i, plus D log 2
        weights = (D - np.arange(D) + 1).astype(np.float64)
        return rows, cols, diag_pos, weights

    def to_unconstrained(self, constrained) -> np.ndarray:
        S = np.asarray(constrained, dtype=np.float64)
        D = self.dims
        if S.shape[-2:] != (D, D):
            raise ValueError(f"cholesky_cov: expected trailing shape ({D}, {D}), got {S.shape}")
        if not np.all(np.isfinite(S)):
            raise ValueError("cholesky_cov: non-finite entries")
        if not np.allclose(S, np.swapaxes(S, -1, -2), rtol=1e-10, atol=1e-12):
            raise ValueError("cholesky_cov: matrix is not symmetric")
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise ValueError("cholesky_cov: matrix is not positive definite") from None
        rows, cols, diag_pos, _ = self._layout()
        u = L[..., rows, cols].copy()
        u[..., diag_pos] = np.log(u[..., diag_pos])
        return u

    def factor(self, u) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(L, log_diag, logdet)`` for unconstrained ``u``.

        ``log_diag[..., i] = log L_ii`` is read straight off ``u``; models use
        it for Gaussian normalizers without a log/exp round trip.
        """
        u = dc.as_tensor(u)
        self._check_last_dim(u)
        D = self.dims
        rows, cols, diag_pos, weights = self._layout()
        m = u.shape[-1]
        is_diag = np.zeros(m, dtype=bool)
        is_diag[diag_pos] = True
        log_diag = u[..., diag_pos]
        # exp on the diagonal coordinates only; off-diagonals pass through
        entries = u * Tensor((~is_diag).astype(np.float64)) + dc.exp(u) * Tensor(is_diag.astype(np.float64))
        # scatter into D x D via a constant selection matrix (m -> D*D)
        scatter = np.zeros((m, D * D))
        scatter[np.arange(m), rows * D + cols] = 1.0
        L = (entries @ Tensor(scatter)).reshape(u.shape[:-1] + (D, D))
        logdet = D * np.log(2.0) + (log_diag * Tensor(weights)).sum(axis=-1)
        return L, log_diag, logdet

    def from_unconstrained(self, u):
        L, _, logdet = self.factor(u)
        nd = L.ndim
        axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
        return L @ L.transpose(axes), logdet


def to_unconstrained(b: Bijector, constrained) -> np.ndarray:
    return b.to_unconstrained(constrained)


def from_unconstrained(b: Bijector, u):
    return b.from_unconstrained(u)


def make_bijector(kind: str, dims: int) -> Bijector:
    table = {
        Identity.kind: Identity,
        StickBreaking.kind: StickBreaking,
        CholeskyCovariance.kind: CholeskyCovariance,
    }
    if kind not in table:
        raise ValueError(f"unknown bijector kind {kind!r}")
    return table[kind](dims)
