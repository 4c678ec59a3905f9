"""Stochastic-gradient training of the AR-HMM student."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .. import diffcore as dc
from ..arhmm import ARHMMParams, batch_log_likelihood, hmm_posterior, lagged_design, recognition_inputs
from ..diffcore import Tape, backward
from ..distill import (
    Discriminator,
    SimilarityConfig,
    composite_objective,
    discriminator_loss,
    similarity_loss,
    student_features,
)
from .elbo import ELBO_FIELDS, ElboBreakdown, ObjectiveWeights, elbo_estimate, elbo_single_draw
from .optim import Adam
from .recognition import RecognitionNet
from .variational import GlobalLayout, GlobalVariationalParams

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "kd", "disc")
_INIT_RIDGE = 1e-3
_INIT_JITTER = 1e-3
_INIT_RESTARTS = 10


LR_SCHEDULES = ("constant", "cosine")
DEFAULT_EPOCHS = {"baseline": 20, "kd": 10, "disc": 10}


@dataclass
class TrainingConfig:
    num_states: int = 5
    ar_order: int = 1
    epochs: int | None = None  # None: 20 for the baseline, 10 with a constraint
    batch_size: int = 64
    learning_rate: float = 1e-2
    lr_schedule: str = "constant"
    seed: int = 0
    num_mc: int = 1
    eval_num_mc: int = 64
    trace_num_mc: int = 4
    hidden_sizes: tuple = (32,)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    init_omega: float = -6.0
    warmup_epochs: int = 3

    def __post_init__(self):
        if (self.epochs is not None and self.epochs < 1) or self.batch_size < 1 or self.num_mc < 1:
            raise ValueError("epochs, batch_size and num_mc must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)

    def epochs_for(self, variant: str) -> int:
        return DEFAULT_EPOCHS[variant] if self.epochs is None else self.epochs

    def learning_rate_at(self, epoch: int, epochs: int) -> float:
        """Step size for zero-based ``epoch``; ``cosine`` anneals from the base rate toward 0."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))


@dataclass
class DistillationConstraint:
    """``kd``: teacher feature rows aligned with the training rows. ``disc``: binary labels."""

    variant: str
    teacher_features: np.ndarray | None = None
    labels: np.ndarray | None = None
    normalization: str = "row"

    def __post_init__(self):
        if self.variant not in ("kd", "disc"):
            raise ValueError(f"constraint variant must be 'kd' or 'disc', got {self.variant!r}")
        if self.variant == "kd" and self.teacher_features is None:
            raise ValueError("kd constraint needs teacher features")
        if self.variant == "disc" and self.labels is None:
            raise ValueError("disc constraint needs labels")


@dataclass
class FitResult:
    params: ARHMMParams
    variational: GlobalVariationalParams
    net: RecognitionNet
    layout: GlobalLayout
    trace: list[dict]
    config: TrainingConfig
    variant: str = "baseline"
    discriminator: Discriminator | None = None

    def features(self, full: np.ndarray) -> np.ndarray:
        """Time-averaged structured-posterior marginals under the point estimate: (N, K)."""
        return posterior_features(self.params, self.net, full)

    def log_likelihood(self, full: np.ndarray) -> float:
        return float(batch_log_likelihood(self.params, full).sum())

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["hidden_sizes"] = list(self.config.hidden_sizes)
        return {
            "variant": self.variant,
            "params": self.params.to_dict(),
            "variational": {"mu": self.variational.mu.tolist(), "omega": self.variational.omega.tolist()},
            "net": self.net.to_dict(),
            "config": cfg,
            "discriminator": None if self.discriminator is None else self.discriminator.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        cfg = dict(d["config"])
        cfg["weights"] = ObjectiveWeights(**cfg["weights"])
        config = TrainingConfig(**cfg)
        params = ARHMMParams.from_dict(d["params"])
        layout = GlobalLayout(params.num_states, params.obs_dim, params.ar_order)
        gv = GlobalVariationalParams(d["variational"]["mu"], d["variational"]["omega"])
        disc = None if d.get("discriminator") is None else Discriminator.from_dict(d["discriminator"])
        return cls(params, gv, RecognitionNet.from_dict(d["net"]), layout, [], config, d["variant"], disc)


def posterior_features(params: ARHMMParams, net: RecognitionNet, full: np.ndarray) -> np.ndarray:
    terms = params.terms()
    potentials = net.apply(net.weights, recognition_inputs(full, params.ar_order))
    post = hmm_posterior(terms.log_initial, terms.log_transitions, potentials)
    return np.asarray(student_features(post).value)


def initial_params(full: np.ndarray, num_states: int, ar_order: int, rng: np.random.Generator | None = None) -> ARHMMParams:
    """Starting point for training.

    Without ``rng``: uniform chain, lag-1 blocks of 0.9 I, biases at 0.1 times
    the pooled mean, half the pooled covariance for every state. With ``rng``
    the lagged design rows are clustered by k-means++ and each state whose
    cluster is large enough gets a ridge least-squares AR fit and the residual
    covariance of its cluster. Identical starting states sit on a saddle that
    the optimizer often leaves toward a collapsed solution.
    """
    N, D, T = full.shape
    pooled = np.transpose(full, (0, 2, 1)).reshape(-1, D)
    mean = pooled.mean(axis=0)
    cov = np.atleast_2d(np.cov(pooled, rowvar=False)) if pooled.shape[0] > 1 else np.eye(D)
    cov = 0.5 * cov + 1e-6 * np.eye(D)
    K = num_states
    A = np.zeros((K, D, ar_order * D))
    A[:, :, :D] = 0.9 * np.eye(D)
    b = np.tile(0.1 * mean, (K, 1))
    S = np.tile(cov, (K, 1, 1))
    if rng is not None and K > 1:
        obs, lags = lagged_design(full, ar_order)
        y = obs.reshape(-1, D)
        X = np.hstack([lags.reshape(-1, ar_order * D), np.ones((y.shape[0], 1))])
        if y.shape[0] >= K:
            labels = _best_kmeans(np.hstack([y, X[:, :-1]]), K, rng)
            for k in range(K):
                sel = labels == k
                if sel.sum() < 2 * X.shape[1] + D:
                    continue
                Xk, yk = X[sel], y[sel]
                coef = np.linalg.solve(Xk.T @ Xk + _INIT_RIDGE * np.eye(X.shape[1]), Xk.T @ yk)
                resid = yk - Xk @ coef
                A[k] = coef[:-1].T
                b[k] = coef[-1]
                S[k] = resid.T @ resid / sel.sum() + _INIT_JITTER * np.eye(D)
    return ARHMMParams(np.full(K, 1.0 / K), np.full((K, K), 1.0 / K), A, b, S)


def _best_kmeans(data: np.ndarray, K: int, rng: np.random.Generator, restarts: int = _INIT_RESTARTS) -> np.ndarray:
    """Labels of the lowest-distortion k-means++ run."""
    best, best_cost = None, np.inf
    for _ in range(restarts):
        centres, labels = kmeans2(data, K, minit="++", seed=rng)
        cost = float(np.sum((data - centres[labels]) ** 2))
        if cost < best_cost:
            best, best_cost = labels, cost
    return best


def _as_training_array(data) -> np.ndarray:
    if hasattr(data, "student") and hasattr(data, "split"):
        arr = data.student[data.split == "train"]
    else:
        arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError("training data must be a non-empty (N, D, T) array")
    if not np.all(np.isfinite(arr)):
        raise ValueError("training data contain non-finite values; impute first")
    return arr


def fit(data, config: TrainingConfig = TrainingConfig(), constraint: DistillationConstraint | None = None) -> FitResult:
    """Minibatch Adam on the negative weighted ELBO plus the optional constraint loss.

    ``data`` is an (N, D, T_full) array, or a cohort whose training split is
    used. Constraint arrays must be row-aligned with the training rows.
    """
    full = _as_training_array(data)
    N, D, Tf = full.shape
    K, r = config.num_states, config.ar_order
    weights = config.weights
    variant = "baseline" if constraint is None else constraint.variant
    if constraint is not None:
        aux = constraint.teacher_features if variant == "kd" else constraint.labels
        if len(aux) != N:
            raise ValueError(f"constraint has {len(aux)} rows, training data has {N}")

    layout = GlobalLayout(K, D, r)
    root = np.random.SeedSequence(config.seed)
    ss_init, ss_shuffle, ss_eps, ss_trace, ss_disc, ss_kmeans = root.spawn(6)
    rng_shuffle = np.random.default_rng(ss_shuffle)
    rng_eps = np.random.default_rng(ss_eps)
    trace_eps = np.random.default_rng(ss_trace).standard_normal((config.trace_num_mc, layout.size))

    init = initial_params(full, K, r, np.random.default_rng(ss_kmeans))
    params = {"mu": layout.pack(init), "omega": np.full(layout.size, config.init_omega)}
    net = RecognitionNet(K, D, r, config.hidden_sizes).initialize(np.random.default_rng(ss_init))
    for k, v in net.weights.items():
        params["rec." + k] = v
    disc = None
    if variant == "disc":
        disc = Discriminator(K).initialize(np.random.default_rng(ss_disc))
        for k, v in disc.weights.items():
            params["disc." + k] = v
    opt = Adam(params, lr=config.learning_rate)
    rec_keys = [k for k in params if k.startswith("rec.")]

    obs_all, lags_all = lagged_design(full, r)
    rec_all = recognition_inputs(full, r)
    sim_cfg = SimilarityConfig(1.0, constraint.normalization if constraint is not None else "row")
    trace: list[dict] = []

    epochs = config.epochs_for(variant)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        opt.lr = config.learning_rate_at(epoch, epochs)
        perm = rng_shuffle.permutation(N)
        sums = {name: 0.0 for name in ELBO_FIELDS + ("total", "unit_total")}
        sim_sum = disc_sum = 0.0
        nb = 0
        for batch_no, start in enumerate(range(0, N, config.batch_size)):
            idx = np.sort(perm[start : start + config.batch_size])
            B = idx.size
            tape = Tape()
            leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
            rec_w = {k[4:]: t for k, t in leaves.items() if k.startswith("rec.")}
            eps = rng_eps.standard_normal((config.num_mc, layout.size))
            parts = []
            feats = None
            for s in range(config.num_mc):
                u = leaves["mu"] + dc.exp(leaves["omega"]) * eps[s]
                br, loc = elbo_single_draw(
                    u, leaves["omega"], layout, net, rec_w, full[idx], weights,
                    global_scale=B / N, inputs=(obs_all[idx], lags_all[idx], rec_all[idx]),
                )
                parts.append(br)
                f = student_features(loc.posterior)
                feats = f if feats is None else feats + f
            br = _average(parts, weights)
            feats = feats * (1.0 / config.num_mc)
            sim = dloss = None
            if variant == "kd":
                sim = similarity_loss(feats, constraint.teacher_features[idx], sim_cfg)
            elif variant == "disc":
                disc_w = {k[5:]: t for k, t in leaves.items() if k.startswith("disc.")}
                dloss = discriminator_loss(feats, constraint.labels[idx], disc, disc_w)
            loss = composite_objective(br, sim, dloss, weights)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            grads = backward(tape, loss).by_name()
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError(f"non-finite gradient for {k} at epoch {epoch}, batch {batch_no}")
            opt.step(grads, None if epoch >= config.warmup_epochs else rec_keys)
            for name, v in br.row().items():
                sums[name] += v
            sim_sum += 0.0 if sim is None else sim.item()
            disc_sum += 0.0 if dloss is None else dloss.item()
            nb += 1
        net.weights = {k[4:]: params[k] for k in params if k.startswith("rec.")}
        gv = GlobalVariationalParams(params["mu"], params["omega"])
        eval_br = elbo_estimate(gv, net, full, ObjectiveWeights(), config.trace_num_mc, layout=layout, eps=trace_eps)
        row = {"epoch": epoch + 1, **sums}
        row["similarity_loss"] = sim_sum / nb
        row["discriminator_loss"] = disc_sum / nb
        row["elbo_eval"] = eval_br.unit_total
        row["seconds"] = time.perf_counter() - t0
        trace.append(row)
        log.info("epoch %d elbo %.6g sim %.4g disc %.4g", epoch + 1, eval_br.unit_total, row["similarity_loss"], row["discriminator_loss"])

    net.weights = {k[4:]: params[k].copy() for k in params if k.startswith("rec.")}
    if disc is not None:
        disc.weights = {k[5:]: params[k].copy() for k in params if k.startswith("disc.")}
    gv = GlobalVariationalParams(params["mu"], params["omega"])
    return FitResult(layout.to_params(gv.mu), gv, net, layout, trace, config, variant, disc)


def _average(parts: list[ElboBreakdown], weights: ObjectiveWeights) -> ElboBreakdown:
    if len(parts) == 1:
        return parts[0]
    scale = 1.0 / len(parts)
    comps = {}
    for name in ELBO_FIELDS:
        acc = None
        for p in parts:
            v = getattr(p, name)
            acc = v if acc is None else acc + v
        comps[name] = acc * scale
    return ElboBreakdown.from_components(weights, **comps)
