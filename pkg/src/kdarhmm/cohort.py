"""Synthetic ICU cohorts, long-format CSV ingestion, imputation and splitting.

Synthetic patients follow a latent Markov chain. Each variable evolves as a
diagonal AR(1) process pulled toward its state's mean, is mapped to a
physiological location and scale, and is masked completely at random.
Outcomes are Bernoulli draws on a logistic function of state occupancy.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from . import kvconfig as kv

log = logging.getLogger(__name__)

OUTCOMES = ("mortality", "edema", "dialysis", "mech_vent", "diuretics")
SPLITS = ("train", "val", "test")
EARLY_SUFFIX = "_first24h"

# (name, location, scale): variables seen by both models.
STUDENT_VARIABLES = (
    ("heart_rate", 88.0, 18.0),
    ("diastolic_bp", 60.0, 12.0),
    ("systolic_bp", 115.0, 20.0),
    ("mean_bp", 78.0, 13.0),
    ("min_diastolic_bp", 52.0, 11.0),
    ("min_systolic_bp", 100.0, 19.0),
    ("min_mean_bp", 68.0, 12.0),
    ("temperature", 37.0, 0.8),
    ("sofa", 6.0, 3.0),
    ("gcs", 12.0, 3.0),
    ("platelet", 200.0, 90.0),
    ("hemoglobin", 10.0, 2.0),
    ("calcium", 8.3, 0.8),
    ("bun", 30.0, 20.0),
    ("creatinine", 1.6, 1.2),
    ("bicarbonate", 22.0, 4.0),
    ("lactate", 2.5, 1.8),
    ("potassium", 4.1, 0.6),
    ("bilirubin", 1.5, 2.0),
    ("glucose", 140.0, 45.0),
    ("po2", 110.0, 50.0),
    ("so2", 95.0, 4.0),
    ("spo2", 96.0, 3.0),
    ("pco2", 41.0, 9.0),
    ("total_co2", 23.0, 5.0),
    ("ph", 7.36, 0.08),
    ("base_excess", -2.0, 5.0),
    ("weight", 82.0, 22.0),
    ("respiratory_rate", 20.0, 5.0),
    ("total_fluids", 150.0, 120.0),
    ("urine_output", 90.0, 70.0),
    ("total_urine_output", 1500.0, 900.0),
    ("fluid_bolus", 80.0, 150.0),
    ("vasopressor_amount", 0.08, 0.12),
)

# Variables seen only by the teacher.
TEACHER_ONLY_VARIABLES = (
    ("min_mean_bp_from_baseline", -8.0, 10.0),
    ("gcs_motor", 5.0, 1.2),
    ("gcs_verbal", 3.0, 1.6),
    ("gcs_eye", 3.0, 1.0),
    ("o2_requirement", 2.0, 1.5),
    ("edema_indicator", 0.2, 0.4),
    ("cumulative_edema", 0.25, 0.43),
    ("diuretics_indicator", 0.15, 0.36),
    ("diuretics_amount", 10.0, 25.0),
    ("dialysis_indicator", 0.03, 0.17),
    ("mech_vent_indicator", 0.4, 0.49),
    ("bolus_indicator", 0.3, 0.46),
    ("vasopressor_indicator", 0.35, 0.48),
)

# Remaining-cohort prevalence per outcome, and the share of patients removed
# per outcome for having it within the observation window.
DEFAULT_PREVALENCE = {"mortality": 0.13, "edema": 0.181, "dialysis": 0.022, "mech_vent": 0.053, "diuretics": 0.151}
DEFAULT_EARLY_ONSET = {"mortality": 0.0, "edema": 0.376, "dialysis": 0.073, "mech_vent": 0.483, "diuretics": 0.203}


class CohortError(ValueError):
    """Malformed cohort input; messages carry file and line where applicable."""


@dataclass(frozen=True)
class CohortSchema:
    variables: tuple[str, ...]
    student_variables: tuple[str, ...]
    num_steps: int = 24

    def __post_init__(self):
        if len(set(self.variables)) != len(self.variables):
            raise CohortError("schema variables must be unique")
        missing = [v for v in self.student_variables if v not in self.variables]
        if missing:
            raise CohortError(f"student variables not in schema: {missing}")
        if self.num_steps < 1:
            raise CohortError("num_steps must be positive")


DEFAULT_SCHEMA = CohortSchema(
    tuple(v[0] for v in STUDENT_VARIABLES + TEACHER_ONLY_VARIABLES),
    tuple(v[0] for v in STUDENT_VARIABLES),
)


@dataclass
class CohortTensor:
    """Patients x variables x hours, NaN where unobserved.

    ``covariates`` holds every variable (the teacher's view); ``student``
    selects ``student_variables``. ``early_onset[o]`` marks patients who had
    outcome ``o`` inside the observation window.
    """

    patient_ids: list[str]
    variables: tuple[str, ...]
    student_variables: tuple[str, ...]
    covariates: np.ndarray
    outcomes: dict[str, np.ndarray] = field(default_factory=dict)
    early_onset: dict[str, np.ndarray] = field(default_factory=dict)
    split: np.ndarray | None = None
    states: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        N = self.covariates.shape[0]
        if self.covariates.ndim != 3 or self.covariates.shape[1] != len(self.variables):
            raise CohortError(f"covariates must be (N, {len(self.variables)}, T), got {self.covariates.shape}")
        if len(self.patient_ids) != N:
            raise CohortError(f"{len(self.patient_ids)} patient ids for {N} rows")
        if len(set(self.patient_ids)) != N:
            raise CohortError("patient ids must be unique")
        for name, y in self.outcomes.items():
            if len(y) != N:
                raise CohortError(f"outcome {name} has {len(y)} labels for {N} patients")
        if self.split is not None and len(self.split) != N:
            raise CohortError("split tags do not match the patient count")

    @property
    def num_patients(self) -> int:
        return self.covariates.shape[0]

    @property
    def num_steps(self) -> int:
        return self.covariates.shape[2]

    @property
    def student_index(self) -> np.ndarray:
        pos = {v: i for i, v in enumerate(self.variables)}
        return np.array([pos[v] for v in self.student_variables], dtype=np.intp)

    @property
    def student(self) -> np.ndarray:
        return self.covariates[:, self.student_index, :]

    @property
    def teacher(self) -> np.ndarray:
        return self.covariates

    @property
    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.covariates)

    def indices(self, split: str) -> np.ndarray:
        if self.split is None:
            raise CohortError("cohort has no split assignment")
        return np.flatnonzero(self.split == split)

    def subset(self, idx) -> "CohortTensor":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return CohortTensor(
            [self.patient_ids[i] for i in idx],
            self.variables,
            self.student_variables,
            self.covariates[idx],
            {k: v[idx] for k, v in self.outcomes.items()},
            {k: v[idx] for k, v in self.early_onset.items()},
            None if self.split is None else self.split[idx],
            None if self.states is None else self.states[idx],
            dict(self.meta),
        )

    def for_outcome(self, outcome: str) -> "CohortTensor":
        """Patients eligible for ``outcome``: early-onset cases removed."""
        if outcome not in self.outcomes:
            raise CohortError(f"unknown outcome {outcome!r}; have {sorted(self.outcomes)}")
        early = self.early_onset.get(outcome)
        if early is None:
            return self
        return self.subset(~early.astype(bool))


@dataclass
class GeneratorConfig:
    """Latent-state cohort generator settings.

    ``means``, ``ar_coefs`` and ``noise_scales`` are (K, D) in standardized
    units; ``locations`` and ``scales`` map them to physiological units. The
    first ``student_dim`` variables are visible to the student.
    """

    num_patients: int
    initial: np.ndarray
    transitions: np.ndarray
    means: np.ndarray
    ar_coefs: np.ndarray
    noise_scales: np.ndarray
    outcome_weights: dict[str, np.ndarray]
    variables: tuple[str, ...] = DEFAULT_SCHEMA.variables
    student_dim: int = len(STUDENT_VARIABLES)
    locations: np.ndarray | None = None
    scales: np.ndarray | None = None
    prevalence: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PREVALENCE))
    early_onset_rate: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_EARLY_ONSET))
    num_steps: int = 24
    missing_rate: float = 0.0
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.ar_coefs = np.asarray(self.ar_coefs, dtype=np.float64)
        self.noise_scales = np.asarray(self.noise_scales, dtype=np.float64)
        self.variables = tuple(self.variables)
        D = len(self.variables)
        known = dict((v[0], v[1:]) for v in STUDENT_VARIABLES + TEACHER_ONLY_VARIABLES)
        if self.locations is None:
            self.locations = np.array([known.get(v, (0.0, 1.0))[0] for v in self.variables])
        if self.scales is None:
            self.scales = np.array([known.get(v, (0.0, 1.0))[1] for v in self.variables])
        self.locations = np.asarray(self.locations, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.outcome_weights = {k: np.asarray(v, dtype=np.float64) for k, v in self.outcome_weights.items()}
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        self.validate(D)

    @property
    def num_states(self) -> int:
        return self.initial.shape[0]

    def validate(self, D: int | None = None) -> "GeneratorConfig":
        D = len(self.variables) if D is None else D
        K = self.num_states
        if self.num_patients < 1:
            raise CohortError("num_patients must be positive")
        if self.num_steps < 2:
            raise CohortError("num_steps must be at least 2")
        if K < 1 or np.any(self.initial < 0) or abs(self.initial.sum() - 1) > 1e-9:
            raise CohortError("initial must be a probability vector")
        if self.transitions.shape != (K, K) or np.any(self.transitions < 0):
            raise CohortError(f"transitions must be a nonnegative {K}x{K} matrix")
        if np.any(np.abs(self.transitions.sum(axis=1) - 1) > 1e-9):
            raise CohortError("transition rows must sum to 1")
        for name in ("means", "ar_coefs", "noise_scales"):
            if getattr(self, name).shape != (K, D):
                raise CohortError(f"{name} must be ({K}, {D}), got {getattr(self, name).shape}")
        if np.any(np.abs(self.ar_coefs) >= 1):
            raise CohortError("AR coefficients must lie in (-1, 1)")
        if np.any(self.noise_scales <= 0) or np.any(self.scales <= 0):
            raise CohortError("noise scales and variable scales must be positive")
        if self.locations.shape != (D,) or self.scales.shape != (D,):
            raise CohortError("locations and scales need one entry per variable")
        if not 1 <= self.student_dim <= D:
            raise CohortError("student_dim must be between 1 and the number of variables")
        if not 0.0 <= self.missing_rate <= 0.5:
            raise CohortError("missing_rate must lie in [0, 0.5]")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9 or min(self.split_fractions) < 0:
            raise CohortError("split_fractions must be three nonnegative numbers summing to 1")
        for name, w in self.outcome_weights.items():
            if w.shape != (K,):
                raise CohortError(f"outcome {name} weights must have {K} entries")
            p = self.prevalence.get(name)
            if p is None or not 0 < p < 1:
                raise CohortError(f"outcome {name} needs a prevalence in (0, 1)")
            e = self.early_onset_rate.get(name, 0.0)
            if not 0 <= e < 1:
                raise CohortError(f"outcome {name} early-onset rate must lie in [0, 1)")
        return self

    def schema(self) -> CohortSchema:
        return CohortSchema(self.variables, self.variables[: self.student_dim], self.num_steps)

    # --- text format -----------------------------------------------------

    def to_kv(self) -> str:
        items: dict[str, object] = {
            "num_patients": self.num_patients,
            "num_steps": self.num_steps,
            "seed": self.seed,
            "missing_rate": self.missing_rate,
            "split_fractions": np.array(self.split_fractions),
            "variables": ", ".join(self.variables),
            "student_dim": self.student_dim,
            "locations": self.locations,
            "scales": self.scales,
            "initial": self.initial,
            "transitions": self.transitions,
            "means": self.means,
            "ar_coefs": self.ar_coefs,
            "noise_scales": self.noise_scales,
        }
        for name, w in self.outcome_weights.items():
            items[f"outcome.{name}.weights"] = w
            items[f"outcome.{name}.prevalence"] = float(self.prevalence[name])
            items[f"outcome.{name}.early_onset"] = float(self.early_onset_rate.get(name, 0.0))
        return kv.format_kv(items)

    @classmethod
    def from_kv(cls, text_or_dict) -> "GeneratorConfig":
        d = kv.parse_kv(text_or_dict) if isinstance(text_or_dict, str) else dict(text_or_dict)
        names = sorted({k.split(".")[1] for k in d if k.startswith("outcome.") and k.count(".") == 2})
        weights = {n: kv.as_vector(d, f"outcome.{n}.weights") for n in names}
        prevalence = {n: kv.as_float(d, f"outcome.{n}.prevalence") for n in names}
        early = {n: kv.as_float(d, f"outcome.{n}.early_onset", 0.0) for n in names}
        try:
            return cls(
                num_patients=kv.as_int(d, "num_patients"),
                initial=kv.as_vector(d, "initial"),
                transitions=kv.as_matrix(d, "transitions"),
                means=kv.as_matrix(d, "means"),
                ar_coefs=kv.as_matrix(d, "ar_coefs"),
                noise_scales=kv.as_matrix(d, "noise_scales"),
                outcome_weights=weights,
                variables=tuple(kv.as_list(d, "variables")),
                student_dim=kv.as_int(d, "student_dim"),
                locations=kv.as_vector(d, "locations"),
                scales=kv.as_vector(d, "scales"),
                prevalence=prevalence,
                early_onset_rate=early,
                num_steps=kv.as_int(d, "num_steps", 24),
                missing_rate=kv.as_float(d, "missing_rate", 0.0),
                split_fractions=tuple(kv.as_vector(d, "split_fractions", (0.7, 0.15, 0.15))),
                seed=kv.as_int(d, "seed", 0),
            )
        except CohortError as exc:
            raise kv.ConfigError(str(exc)) from None

    # --- presets ---------------------------------------------------------

    @classmethod
    def preset(cls, name: str, num_patients: int = 1000, seed: int = 0, **overrides) -> "GeneratorConfig":
        """Named cohort designs.

        ``planted``: five persistent states well separated in the student
        variables; occupancy of state 1 lowers every outcome's odds and
        occupancy of state 3 raises them.

        ``distill``: six states formed by a slowly switching risk level (low,
        high) crossed with a fast nuisance level (three values). Student
        variables mostly track the nuisance level and see the risk level only
        weakly; teacher-only variables track the risk level. Outcomes depend
        on the time spent at high risk.
        """
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        D = len(DEFAULT_SCHEMA.variables)
        Ds = len(STUDENT_VARIABLES)
        if name == "planted":
            K = 5
            stay = 0.9
            P = np.full((K, K), (1 - stay) / (K - 1))
            np.fill_diagonal(P, stay)
            means = rng.normal(0.0, 1.0, (K, D))
            means[:, :Ds] *= 1.5
            w = np.array([0.0, -4.0, 0.0, 4.0, 0.0])
            cfg = dict(
                initial=np.full(K, 1.0 / K),
                transitions=P,
                means=means,
                ar_coefs=np.full((K, D), 0.5),
                noise_scales=np.full((K, D), 1.0),
                outcome_weights={o: w * (1.0 if o == "mortality" else 0.5) for o in OUTCOMES},
            )
        elif name == "distill":
            risk_switch, nuisance_switch = 0.02, 0.1
            Pr = np.array([[1 - risk_switch, risk_switch], [risk_switch, 1 - risk_switch]])
            Pn = np.full((3, 3), nuisance_switch / 2)
            np.fill_diagonal(Pn, 1 - nuisance_switch)
            P = np.kron(Pr, Pn)
            K = 6
            initial = np.kron([0.7, 0.3], np.full(3, 1.0 / 3))
            nuisance = rng.normal(0.0, 1.0, (3, Ds)) * overrides.pop("nuisance_shift", 2.0)
            risk_student = rng.choice([-1.0, 1.0], Ds) * overrides.pop("student_risk_shift", 0.15)
            risk_teacher = rng.choice([-1.0, 1.0], D - Ds) * overrides.pop("teacher_risk_shift", 1.5)
            means = np.zeros((K, D))
            for r in range(2):
                for n in range(3):
                    means[3 * r + n, :Ds] = nuisance[n] + r * risk_student
                    means[3 * r + n, Ds:] = r * risk_teacher
            high = np.repeat([0.0, 1.0], 3)
            risk_weight = overrides.pop("risk_weight", 5.0)
            cfg = dict(
                initial=initial,
                transitions=P,
                means=means,
                ar_coefs=np.full((K, D), 0.5),
                noise_scales=np.full((K, D), 1.0),
                outcome_weights={o: risk_weight * high * (1.0 if o == "mortality" else 0.6) for o in OUTCOMES},
            )
        else:
            raise CohortError(f"unknown preset {name!r}; choose 'planted' or 'distill'")
        cfg.update(overrides)
        return cls(num_patients=num_patients, seed=seed, **cfg)


# --- generation --------------------------------------------------------------


def _sample_chain(initial, transitions, N, T, rng) -> np.ndarray:
    cum0 = np.cumsum(initial)
    cumP = np.cumsum(transitions, axis=1)
    u = rng.random((N, T))
    K = initial.shape[0]
    z = np.empty((N, T), dtype=np.int64)
    z[:, 0] = np.minimum(np.searchsorted(cum0, u[:, 0], side="right"), K - 1)
    for t in range(1, T):
        rows = cumP[z[:, t - 1]]
        z[:, t] = np.minimum((u[:, t, None] >= rows).sum(axis=1), K - 1)
    return z


def _calibrate_intercept(scores: np.ndarray, prevalence: float) -> float:
    """Intercept ``c`` with ``mean(sigmoid(c + scores)) == prevalence``."""
    f = lambda c: float(expit(c + scores).mean()) - prevalence
    lo, hi = -50.0 - scores.max(), 50.0 - scores.min()
    return brentq(f, lo, hi, xtol=1e-12)


def generate(cfg: GeneratorConfig) -> CohortTensor:
    """Sample a cohort; identical configs give identical cohorts."""
    cfg.validate()
    N, T, K = cfg.num_patients, cfg.num_steps, cfg.num_states
    ss_chain, ss_emit, ss_out, ss_miss, ss_split = np.random.SeedSequence(cfg.seed).spawn(5)
    z = _sample_chain(cfg.initial, cfg.transitions, N, T, np.random.default_rng(ss_chain))

    rng = np.random.default_rng(ss_emit)
    D = len(cfg.variables)
    x = np.empty((N, D, T))
    eps = rng.standard_normal((N, D, T))
    a, mu, sd = cfg.ar_coefs, cfg.means, cfg.noise_scales
    z0 = z[:, 0]
    x[:, :, 0] = mu[z0] + sd[z0] / np.sqrt(1.0 - a[z0] ** 2) * eps[:, :, 0]
    for t in range(1, T):
        zt = z[:, t]
        x[:, :, t] = a[zt] * x[:, :, t - 1] + (1.0 - a[zt]) * mu[zt] + sd[zt] * eps[:, :, t]
    x = cfg.locations[None, :, None] + cfg.scales[None, :, None] * x

    occupancy = np.stack([(z == k).mean(axis=1) for k in range(K)], axis=1)
    rng_out = np.random.default_rng(ss_out)
    outcomes, early = {}, {}
    for name in sorted(cfg.outcome_weights):
        e = rng_out.random(N) < cfg.early_onset_rate.get(name, 0.0)
        scores = occupancy @ cfg.outcome_weights[name]
        c = _calibrate_intercept(scores[~e], cfg.prevalence[name]) if np.any(~e) else 0.0
        y = rng_out.random(N) < expit(c + scores)
        outcomes[name] = (y | e).astype(np.int8)
        early[name] = e

    if cfg.missing_rate > 0:
        mask = np.random.default_rng(ss_miss).random(x.shape) < cfg.missing_rate
        x[mask] = np.nan

    width = max(5, len(str(N)))
    ids = [f"P{i + 1:0{width}d}" for i in range(N)]
    cohort = CohortTensor(
        ids, cfg.variables, cfg.variables[: cfg.student_dim], x, outcomes, early,
        states=z, meta={"dropped_incomplete": 0},
    )
    stratum = "mortality" if "mortality" in outcomes else None
    return split(cohort, cfg.split_fractions, int(ss_split.generate_state(1)[0]), stratify=stratum)


# --- splitting ---------------------------------------------------------------


def split_sizes(n: int, fractions) -> np.ndarray:
    """Largest-remainder rounding of ``n * fractions``."""
    f = np.asarray(fractions, dtype=np.float64)
    quota = n * f
    sizes = np.floor(quota).astype(np.int64)
    order = np.argsort(-(quota - sizes), kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    return sizes


def _interleaved_labels(sizes) -> np.ndarray:
    """Split indices spread evenly along a sequence: split ``s`` sits at ``(j + 0.5) / sizes[s]``."""
    pos, lab = [], []
    for s, n in enumerate(sizes):
        pos.append((np.arange(n) + 0.5) / n)
        lab.append(np.full(n, s))
    pos, lab = np.concatenate(pos), np.concatenate(lab)
    return lab[np.lexsort((lab, pos))]


def split(cohort: CohortTensor, fractions=(0.7, 0.15, 0.15), seed: int = 0, stratify: str | None = "mortality") -> CohortTensor:
    """Tag patients train/val/test.

    Patients are shuffled within each stratum, strata are concatenated, and
    the sequence is walked against split labels spread evenly over its
    length, so every stratum is divided in near-exact proportion.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise CohortError("fractions must be three nonnegative numbers summing to 1")
    N = cohort.num_patients
    sizes = split_sizes(N, fractions)
    if np.any(sizes == 0):
        raise CohortError(f"split sizes {sizes.tolist()} leave an empty split")
    rng = np.random.default_rng(seed)
    if stratify is None:
        order = rng.permutation(N)
    else:
        y = np.asarray(cohort.outcomes[stratify])
        parts = [rng.permutation(np.flatnonzero(y == v)) for v in np.unique(y)[::-1]]
        order = np.concatenate(parts)
    tags = np.empty(N, dtype=object)
    tags[order] = np.array(SPLITS, dtype=object)[_interleaved_labels(sizes)]
    out = replace(cohort, split=tags.astype(str))
    return out


# --- imputation and scaling --------------------------------------------------


def impute(cohort: CohortTensor) -> CohortTensor:
    """Carry each patient's last observation forward; fill leading gaps with the training mean."""
    x = cohort.covariates.copy()
    train = cohort.indices("train")
    if train.size == 0:
        raise CohortError("no training patients to compute population means")
    means = np.empty(x.shape[1])
    for d in range(x.shape[1]):
        vals = x[train, d, :]
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            raise CohortError(f"variable {cohort.variables[d]!r} is never observed in the training split")
        means[d] = vals.mean()
    for t in range(1, x.shape[2]):
        gap = np.isnan(x[:, :, t])
        x[:, :, t][gap] = x[:, :, t - 1][gap]
    lead = np.isnan(x)
    x[lead] = np.broadcast_to(means[None, :, None], x.shape)[lead]
    return replace(cohort, covariates=x, meta={**cohort.meta, "train_means": means.tolist()})


def standardize(cohort: CohortTensor) -> tuple[CohortTensor, np.ndarray, np.ndarray]:
    """Z-score each variable with training-split statistics; returns (cohort, mean, std)."""
    x = cohort.covariates
    if np.any(np.isnan(x)):
        raise CohortError("standardize expects an imputed cohort")
    train = x[cohort.indices("train")]
    mean = train.mean(axis=(0, 2))
    std = train.std(axis=(0, 2))
    std = np.where(std > 1e-12, std, 1.0)
    z = (x - mean[None, :, None]) / std[None, :, None]
    return replace(cohort, covariates=z), mean, std


# --- CSV ---------------------------------------------------------------------


def write_csv(cohort: CohortTensor, directory) -> dict[str, Path]:
    """Write covariates, outcomes, splits and (if present) planted states; returns the paths."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CohortError(f"output directory {directory} does not exist")
    paths = {"covariates": directory / "covariates.csv", "outcomes": directory / "outcomes.csv"}
    with open(paths["covariates"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "hour", "variable", "value"])
        x = cohort.covariates
        for i, pid in enumerate(cohort.patient_ids):
            for t in range(x.shape[2]):
                for d, var in enumerate(cohort.variables):
                    v = x[i, d, t]
                    if not np.isnan(v):
                        w.writerow([pid, t, var, repr(float(v))])
    with open(paths["outcomes"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "outcome", "label"])
        for i, pid in enumerate(cohort.patient_ids):
            for name in sorted(cohort.outcomes):
                w.writerow([pid, name, int(cohort.outcomes[name][i])])
                if name in cohort.early_onset:
                    w.writerow([pid, name + EARLY_SUFFIX, int(cohort.early_onset[name][i])])
    if cohort.split is not None:
        paths["splits"] = directory / "splits.csv"
        with open(paths["splits"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "split"])
            for pid, s in zip(cohort.patient_ids, cohort.split):
                w.writerow([pid, s])
    if cohort.states is not None:
        paths["states"] = directory / "states.csv"
        with open(paths["states"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "hour", "state"])
            for pid, row in zip(cohort.patient_ids, cohort.states):
                for t, s in enumerate(row):
                    w.writerow([pid, t, int(s)])
    return paths


def _rows(path: Path, header: list[str]):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise CohortError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != header:
            raise CohortError(f"{path}:1: expected header {','.join(header)}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise CohortError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, row


def _parse_hour(text: str, where: str, T: int) -> int:
    try:
        h = int(text)
    except ValueError:
        raise CohortError(f"{where}: hour {text!r} is not an integer") from None
    if not 0 <= h < T:
        raise CohortError(f"{where}: hour {h} outside 0..{T - 1}")
    return h


def ingest_csv(covariates_path, outcomes_path=None, splits_path=None, states_path=None,
               schema: CohortSchema = DEFAULT_SCHEMA) -> CohortTensor:
    """Pivot long-format CSVs into a cohort tensor.

    Patients keep their order of first appearance. Patients missing every
    variable at some hour are dropped; the count is logged and stored in
    ``meta["dropped_incomplete"]``.
    """
    covariates_path = Path(covariates_path)
    T = schema.num_steps
    var_pos = {v: i for i, v in enumerate(schema.variables)}
    order: dict[str, int] = {}
    cells: list[tuple[int, int, int, float]] = []
    seen: set[tuple[int, int, int]] = set()
    for line, (pid, hour, var, value) in _rows(covariates_path, ["patient_id", "hour", "variable", "value"]):
        where = f"{covariates_path}:{line}"
        pid = pid.strip()
        if not pid:
            raise CohortError(f"{where}: empty patient_id")
        if var not in var_pos:
            raise CohortError(f"{where}: unknown variable {var!r}")
        h = _parse_hour(hour, where, T)
        try:
            v = float(value)
        except ValueError:
            raise CohortError(f"{where}: value {value!r} is not numeric") from None
        if not np.isfinite(v):
            raise CohortError(f"{where}: value {value!r} is not finite")
        i = order.setdefault(pid, len(order))
        key = (i, h, var_pos[var])
        if key in seen:
            raise CohortError(f"{where}: duplicate entry for patient {pid}, hour {h}, variable {var}")
        seen.add(key)
        cells.append((i, var_pos[var], h, v))
    if not order:
        raise CohortError(f"{covariates_path}: no covariate rows")
    x = np.full((len(order), len(schema.variables), T), np.nan)
    if cells:
        arr = np.array(cells)
        x[arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2].astype(int)] = arr[:, 3]
    complete = ~np.all(np.isnan(x), axis=1).any(axis=1)
    dropped = int((~complete).sum())
    if dropped:
        log.warning("dropped %d patient(s) without data at every hour", dropped)
    ids = [pid for pid, i in sorted(order.items(), key=lambda kv_: kv_[1]) if complete[i]]
    x = x[complete]
    keep = {pid: j for j, pid in enumerate(ids)}

    outcomes, early = {}, {}
    if outcomes_path is not None:
        outcomes_path = Path(outcomes_path)
        labels: dict[str, dict[str, int]] = {}
        for line, (pid, name, label) in _rows(outcomes_path, ["patient_id", "outcome", "label"]):
            where = f"{outcomes_path}:{line}"
            if label.strip() not in ("0", "1"):
                raise CohortError(f"{where}: label {label!r} must be 0 or 1")
            per = labels.setdefault(name, {})
            if pid in per:
                raise CohortError(f"{where}: duplicate label for patient {pid}, outcome {name}")
            per[pid] = int(label)
        for name, per in labels.items():
            vec = np.zeros(len(ids), dtype=np.int8)
            missing = [pid for pid in ids if pid not in per]
            if missing:
                raise CohortError(f"{outcomes_path}: outcome {name} has no label for patient {missing[0]}")
            for pid, j in keep.items():
                vec[j] = per[pid]
            if name.endswith(EARLY_SUFFIX):
                early[name[: -len(EARLY_SUFFIX)]] = vec.astype(bool)
            else:
                outcomes[name] = vec
        orphans = [n for n in early if n not in outcomes]
        if orphans:
            raise CohortError(f"{outcomes_path}: early-onset rows for unknown outcome {orphans[0]}")

    split_tags = None
    if splits_path is not None:
        splits_path = Path(splits_path)
        tags: dict[str, str] = {}
        for line, (pid, s) in _rows(splits_path, ["patient_id", "split"]):
            if s not in SPLITS:
                raise CohortError(f"{splits_path}:{line}: split {s!r} not in {SPLITS}")
            if pid in tags:
                raise CohortError(f"{splits_path}:{line}: duplicate split for patient {pid}")
            tags[pid] = s
        missing = [pid for pid in ids if pid not in tags]
        if missing:
            raise CohortError(f"{splits_path}: no split for patient {missing[0]}")
        split_tags = np.array([tags[pid] for pid in ids])

    states = None
    if states_path is not None:
        states_path = Path(states_path)
        states = np.full((len(ids), T), -1, dtype=np.int64)
        for line, (pid, hour, s) in _rows(states_path, ["patient_id", "hour", "state"]):
            if pid not in keep:
                continue
            h = _parse_hour(hour, f"{states_path}:{line}", T)
            try:
                states[keep[pid], h] = int(s)
            except ValueError:
                raise CohortError(f"{states_path}:{line}: state {s!r} is not an integer") from None
        if np.any(states < 0):
            raise CohortError(f"{states_path}: missing planted states")

    return CohortTensor(ids, schema.variables, schema.student_variables, x, outcomes, early, split_tags, states,
                        {"dropped_incomplete": dropped})


def load_cohort_dir(directory, schema: CohortSchema = DEFAULT_SCHEMA) -> CohortTensor:
    """Ingest the files :func:`write_csv` puts in ``directory``."""
    directory = Path(directory)
    opt = lambda name: directory / name if (directory / name).exists() else None
    return ingest_csv(directory / "covariates.csv", opt("outcomes.csv"), opt("splits.csv"), opt("states.csv"), schema)
