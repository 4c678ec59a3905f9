"""Teacher feature providers: a CSV-backed source and a built-in GRU classifier."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor, backward
from .evalstats import auroc
from .varinfer.optim import Adam

log = logging.getLogger(__name__)

GATES = ("reset", "update", "candidate")


class TeacherFeatureError(ValueError):
    pass


@dataclass
class TeacherFeatures:
    patient_ids: list[str]
    features: np.ndarray
    source: str = "builtin"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise TeacherFeatureError("teacher features must be an N x C matrix")
        if len(self.patient_ids) != self.features.shape[0]:
            raise TeacherFeatureError(f"{len(self.patient_ids)} ids for {self.features.shape[0]} feature rows")
        seen = set()
        for pid in self.patient_ids:
            if pid in seen:
                raise TeacherFeatureError(f"duplicate patient_id {pid!r}")
            seen.add(pid)
        if self.source not in ("file", "builtin"):
            raise TeacherFeatureError("source must be 'file' or 'builtin'")

    def aligned(self, patient_ids) -> np.ndarray:
        """Rows reordered to ``patient_ids``; every id must be present."""
        pos = {pid: i for i, pid in enumerate(self.patient_ids)}
        missing = [pid for pid in patient_ids if pid not in pos]
        if missing:
            raise TeacherFeatureError(f"no teacher features for patient {missing[0]!r}")
        return self.features[[pos[pid] for pid in patient_ids]]


def load_teacher_features(path) -> TeacherFeatures:
    """Parse ``patient_id,f1..fC``; errors name the offending line."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "patient_id" or len(header) < 2:
            raise TeacherFeatureError(f"{path}:1: expected header patient_id,f1..fC")
        expected = [f"f{i}" for i in range(1, len(header))]
        if header[1:] != expected:
            raise TeacherFeatureError(f"{path}:1: feature columns must be named f1..f{len(header) - 1}")
        ids, rows, seen = [], [], {}
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise TeacherFeatureError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            pid = row[0]
            if pid in seen:
                raise TeacherFeatureError(f"{path}:{line}: duplicate patient_id {pid!r} (first on line {seen[pid]})")
            seen[pid] = line
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                bad = next(v for v in row[1:] if not _is_float(v))
                raise TeacherFeatureError(f"{path}:{line}: non-numeric value {bad!r}") from None
            if not all(np.isfinite(vals)):
                raise TeacherFeatureError(f"{path}:{line}: non-finite value")
            ids.append(pid)
            rows.append(vals)
    if not rows:
        raise TeacherFeatureError(f"{path}: no feature rows")
    return TeacherFeatures(ids, np.array(rows), "file")


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def write_teacher_features(path, tf: TeacherFeatures) -> None:
    C = tf.features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id"] + [f"f{i}" for i in range(1, C + 1)])
        for pid, row in zip(tf.patient_ids, tf.features):
            w.writerow([pid] + [repr(float(v)) for v in row])


@dataclass
class RecurrentTeacher:
    """Single-layer GRU over the hourly covariates, with a linear readout of the last hidden state.

    ``W_<gate>`` maps inputs (D x H), ``U_<gate>`` maps the hidden state
    (H x H), ``b_<gate>`` is the gate bias; ``w_out`` (H,) and ``b_out``
    produce the logit. Hidden states stay in (-1, 1) because each update is a
    convex combination of the previous state and a tanh candidate.
    """

    input_dim: int
    hidden_dim: int = 32
    weights: dict = field(default_factory=dict)

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        D, H = self.input_dim, self.hidden_dim
        shapes = {}
        for g in GATES:
            shapes[f"W_{g}"] = (D, H)
            shapes[f"U_{g}"] = (H, H)
            shapes[f"b_{g}"] = (H,)
        shapes["w_out"] = (H,)
        shapes["b_out"] = (1,)
        return shapes

    def initialize(self, rng: np.random.Generator) -> "RecurrentTeacher":
        self.weights = {}
        for name, shape in self.weight_shapes().items():
            if name.startswith("b_"):
                self.weights[name] = np.zeros(shape)
            else:
                self.weights[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        return self

    def zeros(self) -> "RecurrentTeacher":
        self.weights = {name: np.zeros(shape) for name, shape in self.weight_shapes().items()}
        return self

    def run(self, inputs, weights: dict | None = None) -> tuple[Tensor, Tensor]:
        """Final hidden states (N, H) and logits (N,) for inputs (N, D, T)."""
        w = self.weights if weights is None else weights
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.input_dim:
            raise ValueError(f"teacher expects (N, {self.input_dim}, T) inputs, got {x.shape}")
        N, _, T = x.shape
        h = Tensor(np.zeros((N, self.hidden_dim)))
        for t in range(T):
            xt = x[:, :, t]
            r = dc.sigmoid(dc.as_tensor(xt) @ w["W_reset"] + h @ w["U_reset"] + w["b_reset"])
            u = dc.sigmoid(dc.as_tensor(xt) @ w["W_update"] + h @ w["U_update"] + w["b_update"])
            n = dc.tanh(dc.as_tensor(xt) @ w["W_candidate"] + (r * h) @ w["U_candidate"] + w["b_candidate"])
            h = n + u * (h - n)
        logits = h @ w["w_out"] + w["b_out"]
        return h, logits

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "weights": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self.weights.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecurrentTeacher":
        t = cls(int(d["input_dim"]), int(d["hidden_dim"]))
        t.weights = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d["weights"].items()}
        missing = set(t.weight_shapes()) - set(t.weights)
        if missing:
            raise ValueError(f"checkpoint lacks weights {sorted(missing)}")
        return t

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RecurrentTeacher":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TeacherConfig:
    hidden_dim: int = 32
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-2
    seed: int = 0
    outcome: str = "mortality"

    def __post_init__(self):
        if self.hidden_dim < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("hidden_dim, epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TeacherFit:
    teacher: RecurrentTeacher
    best_epoch: int
    best_val_auroc: float
    history: list[dict]
    config: TeacherConfig

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val_auroc": self.best_val_auroc, **asdict(self.config)}


def bce_loss(teacher: RecurrentTeacher, weights: dict, inputs, labels) -> Tensor:
    from .distill import binary_cross_entropy_logits

    _, logits = teacher.run(inputs, weights)
    return binary_cross_entropy_logits(logits, labels)


def fit_teacher(X_train, y_train, X_val, y_val, config: TeacherConfig = TeacherConfig()) -> TeacherFit:
    """Minibatch Adam on mean BCE; returns the weights from the epoch with the best validation AUROC."""
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    for name, X, y in (("training", X_train, y_train), ("validation", X_val, y_val)):
        if X.ndim != 3 or X.shape[0] != y.size:
            raise ValueError(f"{name} inputs must be (N, D, T) with one label per row")
        if not np.all(np.isfinite(X)):
            raise ValueError(f"{name} inputs contain non-finite values; impute first")
        if np.unique(y).size < 2:
            raise ValueError(f"{name} labels contain a single class")
    ss_init, ss_shuffle = np.random.SeedSequence(config.seed).spawn(2)
    teacher = RecurrentTeacher(X_train.shape[1], config.hidden_dim).initialize(np.random.default_rng(ss_init))
    params = teacher.weights
    opt = Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(ss_shuffle)
    N = X_train.shape[0]
    best = (-np.inf, 0, {k: v.copy() for k, v in params.items()})
    history = []
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(N)
        total = 0.0
        for start in range(0, N, config.batch_size):
            idx = np.sort(perm[start : start + config.batch_size])
            tape = Tape()
            leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
            loss = bce_loss(teacher, leaves, X_train[idx], y_train[idx])
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite teacher loss at epoch {epoch}")
            opt.step(backward(tape, loss).by_name())
            total += loss.item() * idx.size
        val = auroc(teacher_predict(teacher, X_val), y_val)
        history.append({"epoch": epoch, "train_bce": total / N, "val_auroc": val})
        log.info("teacher epoch %d bce %.4f val auroc %.4f", epoch, total / N, val)
        if val > best[0]:
            best = (val, epoch, {k: v.copy() for k, v in params.items()})
    teacher.weights = best[2]
    return TeacherFit(teacher, best[1], float(best[0]), history, config)


def train_teacher(cohort, config: TeacherConfig = TeacherConfig()) -> TeacherFit:
    """Fit on the cohort's training split, select by validation AUROC.

    ``cohort`` must be imputed (and usually standardized); the teacher reads
    every covariate.
    """
    tr, va = cohort.indices("train"), cohort.indices("val")
    y = np.asarray(cohort.outcomes[config.outcome])
    return fit_teacher(cohort.teacher[tr], y[tr], cohort.teacher[va], y[va], config)


def _inputs(teacher: RecurrentTeacher, data):
    X = data.teacher if hasattr(data, "teacher") else data
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != teacher.input_dim:
        raise ValueError(f"teacher expects {teacher.input_dim} input variables, got array of shape {X.shape}")
    return X


def teacher_features(teacher: RecurrentTeacher, data, patient_ids=None) -> TeacherFeatures:
    """Final hidden state per patient. ``data`` is a cohort or an (N, D, T) array."""
    X = _inputs(teacher, data)
    if patient_ids is None:
        patient_ids = list(data.patient_ids) if hasattr(data, "patient_ids") else [str(i) for i in range(X.shape[0])]
    h, _ = teacher.run(X)
    return TeacherFeatures(list(patient_ids), h.value.copy(), "builtin")


def teacher_predict(teacher: RecurrentTeacher, data) -> np.ndarray:
    """Sigmoid of the final logit, one probability per patient."""
    _, logits = teacher.run(_inputs(teacher, data))
    return dc.sigmoid(logits).value.copy()
