"""Logistic regression, AUROC, odds ratios and Benjamini-Hochberg adjustment."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit, log_expit
from scipy.stats import norm, rankdata

DEFAULT_L2 = 1e-6
DEFAULT_SCALE = 100.0
MAX_ITER = 100
GRAD_TOL = 1e-8


@dataclass
class LogisticModel:
    coefficients: np.ndarray
    intercept: float
    converged: bool
    iterations: int
    l2: float = DEFAULT_L2

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coefficients + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))

    def covariance(self, X) -> np.ndarray:
        """Inverse observed information of (intercept, coefficients) at the fit."""
        Z = _design(X)
        p = expit(Z @ self.params)
        H = (Z * (p * (1 - p))[:, None]).T @ Z + self.l2 * _penalty(Z.shape[1])
        return np.linalg.inv(H)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.coefficients])


def _check_binary(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise ValueError("labels contain a single class")
    return y


def _design(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _penalty(p: int) -> np.ndarray:
    P = np.eye(p)
    P[0, 0] = 0.0  # intercept is not shrunk
    return P


def completely_separated(Z: np.ndarray, y: np.ndarray) -> bool:
    """True when some hyperplane puts every label strictly on its own side (no finite MLE)."""
    signed = (2.0 * y - 1.0)[:, None] * Z
    res = linprog(np.zeros(Z.shape[1]), A_ub=-signed, b_ub=-np.ones(Z.shape[0]),
                  bounds=[(None, None)] * Z.shape[1], method="highs")
    return res.status == 0


def penalized_loglik(beta: np.ndarray, Z: np.ndarray, y: np.ndarray, l2: float) -> float:
    eta = Z @ beta
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)) - 0.5 * l2 * beta[1:] @ beta[1:])


def fit_logistic(X, y, l2: float = DEFAULT_L2, max_iter: int = MAX_ITER, tol: float = GRAD_TOL,
                 history: list | None = None) -> LogisticModel:
    """Newton's method with step-halving on the l2-penalized log-likelihood.

    Stops when the gradient max-norm drops below ``tol``. Perfect separation
    without a penalty ends with ``converged=False`` rather than an error.
    ``history``, if given, receives the objective after every iteration.
    """
    y = _check_binary(y)
    Z = _design(X)
    if Z.shape[0] != y.size:
        raise ValueError(f"X has {Z.shape[0]} rows, y has {y.size}")
    if l2 < 0:
        raise ValueError("l2 must be nonnegative")
    p = Z.shape[1]
    P = l2 * _penalty(p)
    beta = np.zeros(p)
    f = penalized_loglik(beta, Z, y, l2)
    steps = 0
    for _ in range(max_iter):
        mu = expit(Z @ beta)
        grad = Z.T @ (y - mu) - P @ beta
        if np.max(np.abs(grad)) < tol:
            break
        H = (Z * (mu * (1 - mu))[:, None]).T @ Z + P
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            fc = penalized_loglik(cand, Z, y, l2)
            if np.isfinite(fc) and fc >= f:
                break
            t *= 0.5
        else:
            break  # no ascent along the Newton direction: at the optimum up to rounding
        beta, f = cand, fc
        steps += 1
        if history is not None:
            history.append(f)
    grad = Z.T @ (y - expit(Z @ beta)) - P @ beta
    converged = bool(np.max(np.abs(grad)) < tol and np.all(np.isfinite(beta)))
    if converged and l2 == 0 and completely_separated(Z, y):
        converged = False  # the gradient vanishes only because the coefficients diverge
    return LogisticModel(beta[1:].copy(), float(beta[0]), converged, steps, l2)


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _check_binary(labels)
    if s.size != y.size:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    ranks = rankdata(s)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bh_fdr(p) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size == 0:
        return p.copy()
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    adj = np.maximum(adj, p[order])  # m/i >= 1; guards p*m/m rounding below p
    out = np.empty(m)
    out[order] = adj
    return out


@dataclass
class AssociationRow:
    state_index: int
    odds_ratio: float
    ci_low: float
    ci_high: float
    p_value: float
    adjusted_p_value: float = float("nan")
    coefficient: float = 0.0
    std_error: float = float("inf")

    def as_csv_row(self) -> list[str]:
        return [str(self.state_index)] + [repr(float(v)) for v in
                                          (self.odds_ratio, self.ci_low, self.ci_high, self.p_value, self.adjusted_p_value)]


ASSOCIATION_HEADER = ["state", "or", "ci_low", "ci_high", "p", "adj_p"]
_Z975 = float(norm.ppf(0.975))


def _wald_row(index: int, coef: float, se: float) -> AssociationRow:
    z = coef / se
    p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return AssociationRow(index, float(np.exp(coef)), float(np.exp(coef - _Z975 * se)),
                          float(np.exp(coef + _Z975 * se)), p, coefficient=float(coef), std_error=float(se))


def _degenerate_row(index: int) -> AssociationRow:
    return AssociationRow(index, 1.0, 1.0, 1.0, 1.0)


def _check_features(features, y, scale):
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError("features must be an N x K matrix")
    if F.shape[0] != np.asarray(y).size:
        raise ValueError(f"{F.shape[0]} feature rows for {np.asarray(y).size} labels")
    if not scale > 0:
        raise ValueError("scale must be positive")
    if not np.all(np.isfinite(F)):
        raise ValueError("features must be finite")
    return F


def univariate_odds_ratios(features, y, scale: float = DEFAULT_SCALE, l2: float = DEFAULT_L2) -> list[AssociationRow]:
    """One logistic fit per column of ``scale * features``; BH adjustment across columns.

    Constant columns report OR = 1 and p = 1.
    """
    y = _check_binary(y)
    F = _check_features(features, y, scale) * scale
    rows = []
    for k in range(F.shape[1]):
        col = F[:, k]
        if np.ptp(col) == 0:
            rows.append(_degenerate_row(k))
            continue
        m = fit_logistic(col[:, None], y, l2)
        se = float(np.sqrt(m.covariance(col[:, None])[1, 1]))
        rows.append(_wald_row(k, float(m.coefficients[0]), se))
    adj = bh_fdr([r.p_value for r in rows])
    for r, a in zip(rows, adj):
        r.adjusted_p_value = float(a)
    return rows


def multivariate_odds_ratios(features, y, scale: float = DEFAULT_SCALE, l2: float = DEFAULT_L2,
                             drop_reference: bool = True) -> list[AssociationRow]:
    """Joint logistic fit on ``scale * features`` with the last column dropped as reference."""
    y = _check_binary(y)
    F = _check_features(features, y, scale) * scale
    keep = list(range(F.shape[1] - 1 if drop_reference else F.shape[1]))
    if not keep:
        raise ValueError("need at least two feature columns when dropping a reference")
    X = F[:, keep]
    Z = _design(X)
    rank = np.linalg.matrix_rank(Z)
    if rank < Z.shape[1]:
        _, _, vt = np.linalg.svd(Z, full_matrices=False)
        null = vt[-1]
        involved = [f"state {keep[j - 1]}" if j else "intercept" for j in np.flatnonzero(np.abs(null) > 1e-8)]
        raise ValueError(f"design is rank deficient after dropping the reference; collinear: {', '.join(involved)}")
    m = fit_logistic(X, y, l2)
    cov = m.covariance(X)
    rows = [_wald_row(k, float(m.coefficients[j]), float(np.sqrt(cov[j + 1, j + 1]))) for j, k in enumerate(keep)]
    adj = bh_fdr([r.p_value for r in rows])
    for r, a in zip(rows, adj):
        r.adjusted_p_value = float(a)
    return rows


def state_distributions(paths, num_states: int) -> np.ndarray:
    """Fraction of time each patient spends in each state, from integer paths (N, T)."""
    paths = np.asarray(paths)
    return np.stack([(paths == k).mean(axis=1) for k in range(num_states)], axis=1)


def write_association_csv(path, rows: list[AssociationRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ASSOCIATION_HEADER)
        for r in rows:
            w.writerow(r.as_csv_row())


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def rows_to_dicts(rows: list[AssociationRow]) -> list[dict]:
    return [asdict(r) for r in rows]
