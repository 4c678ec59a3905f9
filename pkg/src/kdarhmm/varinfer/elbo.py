"""Monte-Carlo evidence lower bound and its weighted breakdown."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .. import diffcore as dc
from ..arhmm import BatchPosterior, emission_logprobs, hmm_posterior, lagged_design, recognition_inputs
from ..diffcore import Tensor
from .recognition import RecognitionNet
from .variational import GlobalLayout, GlobalVariationalParams, gaussian_entropy, reparam_sample

# Search space for the seven loss coefficients.
WEIGHT_GRID = {
    "discriminator_coeff": (1e5, 1e7, 1e9),
    "similarity_coeff": (1e9, 1e11, 1e13, 1e15),
    "loglik_coeff": (1.0, 1e3, 1e6),
    "determinants_coeff": (1.0, 1e3, 1e6, 1e9),
    "global_entropy_coeff": (1.0, 1e3, 1e6),
    "local_entropy_coeff": (1.0, 1e3, 1e6),
    "priors_coeff": (1.0, 1e5, 1e10),
}


@dataclass(frozen=True)
class ObjectiveWeights:
    discriminator_coeff: float = 1.0
    similarity_coeff: float = 1.0
    loglik_coeff: float = 1.0
    determinants_coeff: float = 1.0
    global_entropy_coeff: float = 1.0
    local_entropy_coeff: float = 1.0
    priors_coeff: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and nonnegative, got {v}")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "ObjectiveWeights":
        """Draw every coefficient independently and uniformly from its grid options."""
        return cls(**{name: float(opts[rng.integers(len(opts))]) for name, opts in WEIGHT_GRID.items()})

    def to_dict(self) -> dict:
        return asdict(self)


ELBO_FIELDS = (
    "joint_logprob",
    "logdet_global",
    "logdet_local_placeholder",
    "global_entropy",
    "local_entropy",
    "prior_logprob",
)

_COEFF_OF = {
    "joint_logprob": "loglik_coeff",
    "logdet_global": "determinants_coeff",
    "logdet_local_placeholder": "determinants_coeff",
    "global_entropy": "global_entropy_coeff",
    "local_entropy": "local_entropy_coeff",
    "prior_logprob": "priors_coeff",
}


@dataclass
class ElboBreakdown:
    """ELBO components and their weighted total.

    Fields hold floats, or tensors while training. ``unit_total`` is the
    unweighted ELBO; ``stderr`` is the Monte-Carlo standard error of ``total``.
    """

    joint_logprob: object
    logdet_global: object
    logdet_local_placeholder: object
    global_entropy: object
    local_entropy: object
    prior_logprob: object
    total: object = None
    unit_total: object = None
    stderr: float = 0.0

    @classmethod
    def from_components(cls, weights: ObjectiveWeights, **components) -> "ElboBreakdown":
        total = None
        unit = None
        for name in ELBO_FIELDS:
            c = components[name]
            term = getattr(weights, _COEFF_OF[name]) * c
            total = term if total is None else total + term
            unit = c if unit is None else unit + c
        return cls(**components, total=total, unit_total=unit)

    def as_floats(self) -> "ElboBreakdown":
        vals = {name: float(dc.value_of(getattr(self, name))) for name in ELBO_FIELDS + ("total", "unit_total")}
        return ElboBreakdown(**vals, stderr=self.stderr)

    def row(self) -> dict:
        return {name: float(dc.value_of(getattr(self, name))) for name in ELBO_FIELDS + ("total", "unit_total")}

    def check_finite(self):
        for name in ELBO_FIELDS:
            v = dc.value_of(getattr(self, name))
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"ELBO component {name} is not finite")


@dataclass
class LocalTerms:
    posterior: BatchPosterior
    expected_loglik: Tensor  # (N,)
    entropy: Tensor  # (N,)


def local_terms(terms, potentials: Tensor, obs: np.ndarray, lags: np.ndarray) -> LocalTerms:
    """Expected complete-data log-likelihood and entropy under the structured posterior.

    The local posterior is the chain with the model's initial distribution and
    transitions and the recognition potentials as per-step log-scores.
    """
    log_em = emission_logprobs(terms, obs, lags)
    q = hmm_posterior(terms.log_initial, terms.log_transitions, potentials)
    exp_ll = (q.marginals[:, 0, :] * terms.log_initial).sum(axis=1) + (q.marginals * log_em).sum(axis=(1, 2))
    if q.pairwise is not None:
        exp_ll = exp_ll + (q.pairwise.sum(axis=1) * terms.log_transitions).sum(axis=(1, 2))
    return LocalTerms(q, exp_ll, q.entropy)


def elbo_single_draw(
    u,
    omega,
    layout: GlobalLayout,
    net: RecognitionNet,
    net_weights: dict,
    full: np.ndarray,
    weights: ObjectiveWeights,
    global_scale: float = 1.0,
    inputs: tuple | None = None,
) -> tuple[ElboBreakdown, LocalTerms]:
    """Weighted ELBO for one global draw ``u`` over the patients in ``full`` (N, D, T_full).

    Global terms (log-det, prior, global entropy) are multiplied by
    ``global_scale``; minibatch training passes ``B / N`` so that summing over
    one epoch counts them once.
    """
    terms, logdet, prior, _ = layout.unpack(u)
    if inputs is None:
        obs, lags = lagged_design(full, layout.ar_order)
        rec_in = recognition_inputs(full, layout.ar_order)
    else:
        obs, lags, rec_in = inputs
    potentials = net.apply(net_weights, rec_in)
    loc = local_terms(terms, potentials, obs, lags)
    br = ElboBreakdown.from_components(
        weights,
        joint_logprob=loc.expected_loglik.sum(),
        logdet_global=global_scale * logdet,
        logdet_local_placeholder=Tensor(0.0),
        global_entropy=global_scale * gaussian_entropy(omega),
        local_entropy=loc.entropy.sum(),
        prior_logprob=global_scale * prior,
    )
    return br, loc


def elbo_estimate(
    gv: GlobalVariationalParams,
    net: RecognitionNet,
    full: np.ndarray,
    weights: ObjectiveWeights = ObjectiveWeights(),
    num_mc: int = 64,
    seed: int = 0,
    layout: GlobalLayout | None = None,
    eps: np.ndarray | None = None,
) -> ElboBreakdown:
    """Average of ``num_mc`` reparameterized draws; ``stderr`` is the MC standard error of ``total``."""
    if num_mc < 1:
        raise ValueError("num_mc must be at least 1")
    if layout is None:
        layout = GlobalLayout(net.num_states, net.obs_dim, net.ar_order)
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal((num_mc, gv.size))
    obs, lags = lagged_design(full, layout.ar_order)
    rec_in = recognition_inputs(full, layout.ar_order)
    rows = []
    for s in range(num_mc):
        u = reparam_sample(gv.mu, gv.omega, eps[s])
        br, _ = elbo_single_draw(u, gv.omega, layout, net, net.weights, full, weights, inputs=(obs, lags, rec_in))
        br.check_finite()
        rows.append(br.row())
    keys = ELBO_FIELDS + ("total", "unit_total")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    totals = np.array([r["total"] for r in rows])
    stderr = float(totals.std(ddof=1) / np.sqrt(num_mc)) if num_mc > 1 else float("nan")
    return ElboBreakdown(**mean, stderr=stderr)
