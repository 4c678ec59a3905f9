"""Autoregressive hidden Markov model with exact inference.

State ``k`` emits ``x_t ~ N(A_k x~_t + b_k, Sigma_k)`` where ``x~_t`` stacks the
``r`` previous observations, most recent first. Hidden states follow a
first-order Markov chain with initial distribution ``initial_dist`` and
row-stochastic ``transitions``.

All recursions run in log space. The batched kernels (``emission_logprobs``,
``hmm_forward``, ``hmm_posterior``) are written against
:mod:`kdarhmm.diffcore`: on constant inputs they are plain numeric code, on
tape-bound inputs they are differentiable. The single-series functions
(``log_likelihood``, ``forward_backward``, ``viterbi``) wrap them for numeric
use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
STOCHASTIC_TOL = 1e-10


@dataclass
class ARHMMParams:
    initial_dist: np.ndarray  # (K,)
    transitions: np.ndarray  # (K, K), row k = distribution of the next state
    lag_matrices: np.ndarray  # (K, D, r*D)
    biases: np.ndarray  # (K, D)
    covariances: np.ndarray  # (K, D, D)

    def __post_init__(self):
        for name in ("initial_dist", "transitions", "lag_matrices", "biases", "covariances"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.biases.shape[1]

    @property
    def ar_order(self) -> int:
        return self.lag_matrices.shape[2] // self.obs_dim

    def validate(self) -> "ARHMMParams":
        K, D, r = self.num_states, self.obs_dim, self.ar_order
        expected = {
            "initial_dist": (K,),
            "transitions": (K, K),
            "lag_matrices": (K, D, r * D),
            "biases": (K, D),
            "covariances": (K, D, D),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite entries")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError("initial_dist is not a probability vector")
        if np.any(self.transitions < 0) or np.any(np.abs(self.transitions.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
            raise ValueError("transitions is not row-stochastic")
        self.cholesky()
        return self

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.covariances)
        except np.linalg.LinAlgError:
            bad = [k for k in range(self.num_states) if not _is_pd(self.covariances[k])]
            raise ValueError(f"covariance of state(s) {bad} is not positive definite") from None

    def terms(self) -> "ARHMMTerms":
        L = self.cholesky()
        return ARHMMTerms(
            log_initial=dc.log(self.initial_dist),
            log_transitions=dc.log(self.transitions),
            lag_matrices=Tensor(self.lag_matrices),
            biases=Tensor(self.biases),
            chol=Tensor(L),
            chol_log_diag=Tensor(np.log(np.diagonal(L, axis1=1, axis2=2))),
        )

    def permuted(self, perm: Sequence[int]) -> "ARHMMParams":
        """Relabel states so that new state ``j`` is old state ``perm[j]``."""
        p = np.asarray(perm)
        return ARHMMParams(
            self.initial_dist[p],
            self.transitions[np.ix_(p, p)],
            self.lag_matrices[p],
            self.biases[p],
            self.covariances[p],
        )

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "obs_dim": self.obs_dim,
            "ar_order": self.ar_order,
            "initial_dist": self.initial_dist.ravel().tolist(),
            "transitions": self.transitions.ravel().tolist(),
            "lag_matrices": self.lag_matrices.ravel().tolist(),
            "biases": self.biases.ravel().tolist(),
            "covariances": self.covariances.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ARHMMParams":
        K, D, r = int(d["num_states"]), int(d["obs_dim"]), int(d["ar_order"])

        def arr(key, shape):
            values = np.asarray(d[key], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ValueError(f"{key}: expected {int(np.prod(shape))} values, got {values.size}")
            return values.reshape(shape)

        return cls(
            arr("initial_dist", (K,)),
            arr("transitions", (K, K)),
            arr("lag_matrices", (K, D, r * D)),
            arr("biases", (K, D)),
            arr("covariances", (K, D, D)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ARHMMParams":
        return cls.from_dict(json.loads(text))


def _is_pd(S: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(S)
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass
class ARHMMTerms:
    """Log-space view of the parameters consumed by the batched kernels.

    Fields may be constants or tape-bound tensors.
    """

    log_initial: Tensor  # (K,)
    log_transitions: Tensor  # (K, K)
    lag_matrices: Tensor  # (K, D, rD)
    biases: Tensor  # (K, D)
    chol: Tensor  # (K, D, D) lower triangular
    chol_log_diag: Tensor  # (K, D)

    @property
    def num_states(self) -> int:
        return self.biases.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.biases.shape[1]


@dataclass
class SeriesWindow:
    """``observations`` is D x T; ``context`` is D x r, oldest column first."""

    observations: np.ndarray
    context: np.ndarray

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        self.context = np.asarray(self.context, dtype=np.float64).reshape(self.observations.shape[0], -1)
        if self.observations.shape[1] < 1:
            raise ValueError("series needs at least one scored timestep")
        if not (np.all(np.isfinite(self.observations)) and np.all(np.isfinite(self.context))):
            raise ValueError("series contains non-finite values")

    @classmethod
    def from_full(cls, x: np.ndarray, ar_order: int) -> "SeriesWindow":
        """Split a D x T_full matrix: the first ``ar_order`` columns become context."""
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:, ar_order:], x[:, :ar_order])

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[0]

    @property
    def horizon(self) -> int:
        return self.observations.shape[1]

    @property
    def ar_order(self) -> int:
        return self.context.shape[1]

    def full(self) -> np.ndarray:
        return np.concatenate([self.context, self.observations], axis=1)


@dataclass
class StatePosterior:
    marginals: np.ndarray  # (K, T)
    pairwise: np.ndarray  # (T-1, K, K); [t, j, k] = q(z_t = j, z_{t+1} = k)
    log_evidence: float
    entropy: float


# -- design matrices ---------------------------------------------------------

def lagged_design(full: np.ndarray, ar_order: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``full`` (N, D, T_full) into scored observations and lag stacks.

    Returns ``obs`` (N, T, D) for timesteps ``ar_order..T_full-1`` and
    ``lags`` (N, T, r*D) where ``lags[n, t]`` is ``[x_{t-1}; ...; x_{t-r}]``.
    """
    full = np.asarray(full, dtype=np.float64)
    if full.ndim != 3:
        raise ValueError(f"expected (N, D, T) array, got shape {full.shape}")
    N, D, Tf = full.shape
    r = ar_order
    if Tf <= r:
        raise ValueError(f"need more than {r} timesteps, got {Tf}")
    xt = np.transpose(full, (0, 2, 1))  # (N, Tf, D)
    obs = xt[:, r:, :]
    lags = np.concatenate([xt[:, r - l : Tf - l, :] for l in range(1, r + 1)], axis=2)
    return np.ascontiguousarray(obs), np.ascontiguousarray(lags)


def recognition_inputs(full: np.ndarray, ar_order: int) -> np.ndarray:
    """Per-timestep inputs ``[x_t; x_{t-1}; ...; x_{t-r}]`` of shape (N, T, D(r+1))."""
    obs, lags = lagged_design(full, ar_order)
    return np.concatenate([obs, lags], axis=2)


# -- batched kernels ---------------------------------------------------------

def emission_logprobs(terms: ARHMMTerms, obs: np.ndarray, lags: np.ndarray) -> Tensor:
    """log N(x_t; A_k x~_t + b_k, L_k L_k^T) for every patient, timestep, state: (N, T, K)."""
    N, T, D = obs.shape
    K = terms.num_states
    if terms.obs_dim != D:
        raise ValueError(f"model has obs_dim {terms.obs_dim}, data has {D}")
    rD = lags.shape[2]
    if terms.lag_matrices.shape != (K, D, rD):
        raise ValueError(f"lag matrices {terms.lag_matrices.shape} do not match lag stack width {rD}")
    NT = N * T
    A_cols = terms.lag_matrices.transpose(2, 0, 1).reshape(rD, K * D)
    mean = (Tensor(lags.reshape(NT, rD)) @ A_cols).reshape(NT, K, D) + terms.biases
    resid = Tensor(obs.reshape(NT, 1, D)) - mean  # (NT, K, D)
    white = dc.solve_tril(terms.chol, resid.transpose(1, 2, 0))  # (K, D, NT)
    quad = dc.square(white).sum(axis=1)  # (K, NT)
    norm = terms.chol_log_diag.sum(axis=1).reshape(K, 1) + 0.5 * D * LOG_2PI
    logp = -(norm + 0.5 * quad)
    return logp.transpose().reshape(N, T, K)


def hmm_forward(log_initial, log_transitions, log_em) -> tuple[list[Tensor], Tensor]:
    """Log-space forward recursion. Returns per-step ``log_alpha`` (N, K) and ``log Z`` (N,)."""
    log_em = dc.as_tensor(log_em)
    T = log_em.shape[1]
    alpha = log_em[:, 0, :] + log_initial
    alphas = [alpha]
    for t in range(1, T):
        alpha = dc.logsumexp(alpha.reshape(-1, alpha.shape[1], 1) + log_transitions, axis=1) + log_em[:, t, :]
        alphas.append(alpha)
    return alphas, dc.logsumexp(alpha, axis=1)


@dataclass
class BatchPosterior:
    marginals: Tensor  # (N, T, K)
    pairwise: Tensor | None  # (N, T-1, K, K), None when T == 1
    log_normalizer: Tensor  # (N,)
    entropy: Tensor  # (N,)
    expected_score: Tensor  # (N,)


def hmm_posterior(log_initial, log_transitions, log_em) -> BatchPosterior:
    """Exact posterior over state paths of a chain with per-step log-scores ``log_em`` (N, T, K).

    The path entropy is ``log Z - E_q[score]`` where the score is the
    unnormalized log-probability of the path.
    """
    log_em = dc.as_tensor(log_em)
    N, T, K = log_em.shape
    alphas, logZ = hmm_forward(log_initial, log_transitions, log_em)
    betas = [Tensor(np.zeros((N, K)))]
    for t in range(T - 2, -1, -1):
        nxt = (log_em[:, t + 1, :] + betas[0]).reshape(N, 1, K)
        betas.insert(0, dc.logsumexp(nxt + log_transitions, axis=2))
    log_alpha = dc.stack(alphas, axis=1)  # (N, T, K)
    log_beta = dc.stack(betas, axis=1)
    lz = logZ.reshape(N, 1, 1)
    marginals = dc.exp(log_alpha + log_beta - lz)
    score = (marginals[:, 0, :] * log_initial).sum(axis=1) + (marginals * log_em).sum(axis=(1, 2))
    pairwise = None
    if T > 1:
        left = log_alpha[:, :-1, :].reshape(N, T - 1, K, 1)
        right = (log_em[:, 1:, :] + log_beta[:, 1:, :]).reshape(N, T - 1, 1, K)
        pairwise = dc.exp(left + log_transitions + right - logZ.reshape(N, 1, 1, 1))
        score = score + (pairwise.sum(axis=1) * log_transitions).sum(axis=(1, 2))
    return BatchPosterior(marginals, pairwise, logZ, logZ - score, score)


# -- single-series API -------------------------------------------------------

def _check_series(params: ARHMMParams, series: SeriesWindow):
    if series.obs_dim != params.obs_dim:
        raise ValueError(f"series has {series.obs_dim} dims, model has {params.obs_dim}")
    if series.ar_order != params.ar_order:
        raise ValueError(f"series context has {series.ar_order} columns, model order is {params.ar_order}")


def _series_log_em(params: ARHMMParams, series: SeriesWindow) -> tuple[ARHMMTerms, Tensor]:
    _check_series(params, series)
    terms = params.terms()
    obs, lags = lagged_design(series.full()[None], params.ar_order)
    return terms, emission_logprobs(terms, obs, lags)


def emission_logprob(params: ARHMMParams, state: int, x_t, context) -> float:
    """Log density of ``x_t`` under ``state`` given the D x r ``context`` (oldest column first)."""
    if not 0 <= state < params.num_states:
        raise ValueError(f"state {state} out of range for K={params.num_states}")
    D, r = params.obs_dim, params.ar_order
    x_t = np.asarray(x_t, dtype=np.float64).reshape(D)
    context = np.asarray(context, dtype=np.float64).reshape(D, r)
    L = np.linalg.cholesky(params.covariances[state]) if _is_pd(params.covariances[state]) else None
    if L is None:
        raise ValueError(f"covariance of state {state} is not positive definite")
    x_tilde = context[:, ::-1].T.reshape(-1)
    resid = x_t - params.lag_matrices[state] @ x_tilde - params.biases[state]
    white = np.linalg.solve(L, resid)
    return float(-0.5 * D * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * white @ white)


def log_likelihood(params: ARHMMParams, series: SeriesWindow) -> float:
    terms, log_em = _series_log_em(params, series)
    _, logZ = hmm_forward(terms.log_initial, terms.log_transitions, log_em)
    return logZ.item()


def forward_backward(params: ARHMMParams, series: SeriesWindow) -> StatePosterior:
    terms, log_em = _series_log_em(params, series)
    post = hmm_posterior(terms.log_initial, terms.log_transitions, log_em)
    return _to_state_posterior(post, 0)


def _to_state_posterior(post: BatchPosterior, i: int) -> StatePosterior:
    K = post.marginals.shape[2]
    pairwise = post.pairwise.value[i] if post.pairwise is not None else np.zeros((0, K, K))
    return StatePosterior(
        marginals=post.marginals.value[i].T.copy(),
        pairwise=pairwise.copy(),
        log_evidence=float(post.log_normalizer.value[i]),
        entropy=max(float(post.entropy.value[i]), 0.0),
    )


def batch_posteriors(post: BatchPosterior) -> list[StatePosterior]:
    return [_to_state_posterior(post, i) for i in range(post.marginals.shape[0])]


def batch_log_likelihood(params: ARHMMParams, full: np.ndarray) -> np.ndarray:
    """Per-patient log-likelihoods for ``full`` (N, D, T_full); first r columns are context."""
    terms = params.terms()
    obs, lags = lagged_design(full, params.ar_order)
    _, logZ = hmm_forward(terms.log_initial, terms.log_transitions, emission_logprobs(terms, obs, lags))
    return logZ.value.copy()


def _viterbi_from_scores(log_initial, log_transitions, log_em) -> np.ndarray:
    T, K = log_em.shape
    delta = log_initial + log_em[0]
    back = np.zeros((T, K), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + log_transitions  # [from, to]
        back[t] = np.argmax(cand, axis=0)  # first maximum = lowest index
        delta = cand[back[t], np.arange(K)] + log_em[t]
    path = np.zeros(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def viterbi(params: ARHMMParams, series: SeriesWindow) -> np.ndarray:
    terms, log_em = _series_log_em(params, series)
    return _viterbi_from_scores(terms.log_initial.value, terms.log_transitions.value, log_em.value[0])


def batch_viterbi(params: ARHMMParams, full: np.ndarray) -> np.ndarray:
    """Viterbi paths (N, T) for every patient in ``full`` (N, D, T_full)."""
    terms = params.terms()
    obs, lags = lagged_design(full, params.ar_order)
    log_em = emission_logprobs(terms, obs, lags).value
    li, lt = terms.log_initial.value, terms.log_transitions.value
    return np.stack([_viterbi_from_scores(li, lt, log_em[n]) for n in range(log_em.shape[0])])


def path_log_prob(params: ARHMMParams, series: SeriesWindow, path: Sequence[int]) -> float:
    """log p(z_{1:T} = path, x_{1:T} | context)."""
    terms, log_em = _series_log_em(params, series)
    path = np.asarray(path, dtype=np.int64)
    em = log_em.value[0]
    lt = terms.log_transitions.value
    score = terms.log_initial.value[path[0]] + em[np.arange(len(path)), path].sum()
    return float(score + lt[path[:-1], path[1:]].sum())


def sample(
    params: ARHMMParams,
    T: int,
    context,
    seed: int,
    noise_scale: float = 1.0,
) -> tuple[SeriesWindow, np.ndarray]:
    """Ancestral sample of ``T`` scored steps following ``context``.

    ``noise_scale = 0`` gives the noiseless recursion ``x_t = A_z x~_t + b_z``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    K, D, r = params.num_states, params.obs_dim, params.ar_order
    context = np.asarray(context, dtype=np.float64).reshape(D, r)
    L = params.cholesky()
    hist = [context[:, j] for j in range(r)]
    states = np.zeros(T, dtype=np.int64)
    obs = np.zeros((D, T))
    z = rng.choice(K, p=params.initial_dist)
    for t in range(T):
        if t > 0:
            z = rng.choice(K, p=params.transitions[z])
        states[t] = z
        x_tilde = np.concatenate(hist[::-1][:r])
        noise = L[z] @ rng.standard_normal(D)
        x = params.lag_matrices[z] @ x_tilde + params.biases[z] + noise_scale * noise
        obs[:, t] = x
        hist.append(x)
        hist = hist[-r:]
    return SeriesWindow(obs, context), states


def viterbi_state_distribution(paths, K: int) -> np.ndarray:
    """Fraction of timesteps each patient spends in each state: (N, K)."""
    rows = []
    for i, path in enumerate(paths):
        path = np.asarray(path, dtype=np.int64)
        if path.size == 0:
            raise ValueError(f"path {i} is empty")
        if path.min() < 0 or path.max() >= K:
            raise ValueError(f"path {i} has states outside 0..{K - 1}")
        rows.append(np.bincount(path, minlength=K) / path.size)
    if not rows:
        raise ValueError("no paths given")
    return np.vstack(rows)
