"""Distillation losses: normalized similarity matching and the discriminator baseline."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .arhmm import BatchPosterior
from .diffcore import Tensor

DISC_HIDDEN = 16


@dataclass(frozen=True)
class SimilarityConfig:
    gamma: float = 1.0
    normalization: str = "row"

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError("gamma must be finite and nonnegative")
        if self.normalization not in ("row", "column"):
            raise ValueError("normalization must be 'row' or 'column'")


def _check_features(F, what: str = "features"):
    v = dc.value_of(F)
    if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
        raise ValueError(f"{what} must be a non-empty N x C matrix, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what} contain non-finite entries")


def student_features(posteriors) -> np.ndarray | Tensor:
    """Time-averaged state marginals, one row per patient (C_s = K).

    Accepts a list of :class:`StatePosterior` (numeric result) or a batched
    posterior whose marginals are tensors (differentiable result).
    """
    if isinstance(posteriors, BatchPosterior):
        return posteriors.marginals.mean(axis=1)
    posteriors = list(posteriors)
    if not posteriors:
        raise ValueError("need at least one posterior")
    shape = posteriors[0].marginals.shape
    for i, p in enumerate(posteriors):
        if p.marginals.shape != shape:
            raise ValueError(f"posterior {i} has marginals {p.marginals.shape}, expected {shape}")
    return np.vstack([p.marginals.mean(axis=1) for p in posteriors])


def similarity_matrix(F, normalization: str = "row"):
    """Normalized Gram matrix: ``F F^T`` with each row divided by its l2 norm.

    Zero rows stay zero. ``normalization="column"`` divides each column by its
    own norm instead.
    """
    _check_features(F)
    Ft = dc.as_tensor(F)
    gram = Ft @ Ft.transpose()
    axis = 1 if normalization == "row" else 0
    sq = dc.square(gram).sum(axis=axis, keepdims=True)
    zero = (sq.value <= 0.0).astype(np.float64)
    out = gram / dc.sqrt(sq + zero)
    return out if isinstance(F, Tensor) else out.value


def similarity_loss(Fs, Ft, cfg: SimilarityConfig = SimilarityConfig()):
    """``gamma / N^2 * ||S(Fs) - S(Ft)||_F^2``; differentiable in ``Fs``."""
    ns, nt = dc.value_of(Fs).shape[0], dc.value_of(Ft).shape[0]
    if ns != nt:
        raise ValueError(f"student has {ns} rows, teacher has {nt}")
    diff = dc.as_tensor(similarity_matrix(dc.as_tensor(Fs), cfg.normalization)) - similarity_matrix(
        dc.as_tensor(Ft), cfg.normalization
    )
    loss = dc.square(diff).sum() * (cfg.gamma / ns**2)
    return loss if isinstance(Fs, Tensor) else loss.item()


@dataclass
class Discriminator:
    """One hidden tanh layer, sigmoid output."""

    input_dim: int
    hidden: int = DISC_HIDDEN
    weights: dict = field(default_factory=dict)

    def initialize(self, rng: np.random.Generator) -> "Discriminator":
        self.weights = {
            "W0": rng.normal(0.0, 1.0 / np.sqrt(self.input_dim), (self.input_dim, self.hidden)),
            "c0": np.zeros(self.hidden),
            "W1": rng.normal(0.0, 1.0 / np.sqrt(self.hidden), (self.hidden, 1)),
            "c1": np.zeros(1),
        }
        return self

    def logits(self, F, weights: dict | None = None) -> Tensor:
        w = self.weights if weights is None else weights
        h = dc.tanh(dc.as_tensor(F) @ w["W0"] + w["c0"])
        return (h @ w["W1"] + w["c1"]).reshape(-1)

    def predict_proba(self, F) -> np.ndarray:
        return dc.sigmoid(self.logits(np.asarray(dc.value_of(F)))).value.copy()

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "weights": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self.weights.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Discriminator":
        disc = cls(int(d["input_dim"]), int(d["hidden"]))
        disc.weights = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d["weights"].items()}
        return disc


def binary_cross_entropy_logits(logits, labels) -> Tensor:
    """Mean BCE computed from logits without forming probabilities."""
    y = np.asarray(labels, dtype=np.float64)
    logits = dc.as_tensor(logits)
    return (y * dc.softplus(-logits) + (1.0 - y) * dc.softplus(logits)).mean()


def discriminator_loss(Fs, labels: Sequence, disc: Discriminator, weights: dict | None = None):
    """Mean binary cross-entropy of ``disc`` on student features."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    n = dc.value_of(Fs).shape[0]
    if y.size != n:
        raise ValueError(f"{y.size} labels for {n} feature rows")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    loss = binary_cross_entropy_logits(disc.logits(Fs, weights), y)
    differentiable = isinstance(Fs, Tensor) or (weights is not None and any(isinstance(v, Tensor) for v in weights.values()))
    return loss if differentiable else loss.item()


def composite_objective(elbo, sim=None, disc=None, weights=None):
    """Loss to minimize: ``-elbo.total`` plus the active, coefficient-scaled constraint."""
    if sim is not None and disc is not None:
        raise ValueError("similarity and discriminator constraints are separate variants; pass at most one")
    if weights is None:
        from .varinfer.elbo import ObjectiveWeights

        weights = ObjectiveWeights()
    loss = -elbo.total
    if sim is not None:
        loss = loss + weights.similarity_coeff * sim
    if disc is not None:
        loss = loss + weights.discriminator_coeff * disc
    return loss


def write_similarity_csv(path, S) -> None:
    S = np.asarray(dc.value_of(S))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in S:
            w.writerow([repr(float(v)) for v in row])
