"""Command-line pipeline: generate, train-teacher, train-student, evaluate, associate.

Every command reads an optional flat ``key = value`` config (``--config``),
lets flags override it, writes its results under ``--out`` and records the
resolved config, the seed and the sha256 of every result file in
``run_manifest.json``. Wall-clock timings go only to ``run.log``, so result
files are byte-identical across reruns.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kvconfig as kv
from .arhmm import batch_viterbi
from .cohort import (
    OUTCOMES,
    CohortError,
    CohortTensor,
    GeneratorConfig,
    generate,
    impute,
    load_cohort_dir,
    standardize,
    write_csv,
)
from .diffcore import NumericalError
from .distill import similarity_matrix, write_similarity_csv
from .evalstats import (
    auroc,
    fit_logistic,
    multivariate_odds_ratios,
    state_distributions,
    univariate_odds_ratios,
    write_association_csv,
    write_json,
)
from .teacher import (
    RecurrentTeacher,
    TeacherConfig,
    TeacherFeatureError,
    load_teacher_features,
    teacher_features,
    teacher_predict,
    train_teacher,
    write_teacher_features,
)
from .varinfer import DistillationConstraint, ObjectiveWeights, TrainingConfig, fit
from .varinfer.fit import FitResult, VARIANTS

log = logging.getLogger("kdarhmm")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
COEFFS = tuple(ObjectiveWeights.__dataclass_fields__)


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    """Config-file values overridden by explicitly given flags."""

    values: dict[str, str] = field(default_factory=dict)

    @classmethod
    def resolve(cls, args: argparse.Namespace) -> "RunConfig":
        values = kv.read_kv(args.config) if args.config else {}
        for key, val in vars(args).items():
            if key in ("config", "command", "func") or val is None:
                continue
            values[key] = kv.format_value(val)
        return cls(values)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def int(self, key, default=None):
        return kv.as_int(self.values, key, default)

    def float(self, key, default=None):
        return kv.as_float(self.values, key, default)

    def bool(self, key, default=None):
        return kv.as_bool(self.values, key, default)

    def path(self, key, required=True) -> Path | None:
        if key not in self.values:
            if required:
                raise ConfigError(f"missing required setting {key!r}")
            return None
        return Path(self.values[key])

    def ints(self, key, default=None) -> list[int]:
        if key not in self.values:
            return list(default or [])
        try:
            return [int(s) for s in kv.as_list(self.values, key)]
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers") from None


# --- shared helpers ----------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, command: str, cfg: RunConfig, artifacts: list[Path]) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(cfg.values.items()) if k != "out"},
        "seed": cfg.int("seed", 0),
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
    }
    write_json(out / "run_manifest.json", manifest)


def _prepared_cohort(cfg: RunConfig) -> CohortTensor:
    """Load, impute and standardize the cohort directory named by ``cohort``."""
    directory = cfg.path("cohort")
    if not directory.is_dir():
        raise ConfigError(f"cohort directory {directory} does not exist")
    gen_cfg = directory / "generator_config.txt"
    schema = GeneratorConfig.from_kv(gen_cfg.read_text(encoding="utf-8")).schema() if gen_cfg.exists() else None
    cohort = load_cohort_dir(directory, schema) if schema else load_cohort_dir(directory)
    if cohort.split is None:
        raise DataError(f"{directory} has no splits.csv")
    cohort, _, _ = standardize(impute(cohort))
    return cohort


def _seed_ints(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _training_config(cfg: RunConfig, seed: int, weights: ObjectiveWeights) -> TrainingConfig:
    return TrainingConfig(
        num_states=cfg.int("num_states", 5),
        ar_order=cfg.int("ar_order", 1),
        epochs=cfg.int("epochs") if "epochs" in cfg.values else None,
        batch_size=cfg.int("batch_size", 64),
        learning_rate=cfg.float("learning_rate", 0.02),
        lr_schedule=cfg.get("lr_schedule", "constant"),
        seed=seed,
        hidden_sizes=tuple(cfg.ints("hidden", [32])),
        weights=weights,
        init_omega=cfg.float("init_omega", -6.0),
        warmup_epochs=cfg.int("warmup_epochs", 3),
    )


def _configured_weights(cfg: RunConfig, variant: str) -> ObjectiveWeights:
    vals = {}
    for name in COEFFS:
        if name in cfg.values:
            vals[name] = cfg.float(name)
    if variant == "kd":
        vals.setdefault("similarity_coeff", 1e9)
    return ObjectiveWeights(**vals)


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _two_stage(features_train, y_train, features_eval, y_eval, l2=1e-6) -> float:
    model = fit_logistic(features_train, y_train, l2)
    return auroc(model.decision_function(features_eval), y_eval)


def _load_student(path: Path) -> FitResult:
    try:
        with open(path, encoding="utf-8") as fh:
            return FitResult.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot load student checkpoint {path}: {exc}") from None


# --- commands ----------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out: Path) -> list[Path]:
    seed = cfg.int("seed", 0)
    src = cfg.path("generator_config", required=False)
    if src is not None:
        gen = GeneratorConfig.from_kv(kv.read_kv(src))
        gen.seed = seed if "seed" in cfg.values else gen.seed
        if "patients" in cfg.values:
            gen.num_patients = cfg.int("patients")
        if "missing_rate" in cfg.values:
            gen.missing_rate = cfg.float("missing_rate")
    else:
        preset = cfg.get("preset", "distill")
        patients = cfg.int("patients", 1000)
        if patients < 1:
            raise ConfigError("patients must be positive")
        gen = GeneratorConfig.preset(preset, patients, seed, missing_rate=cfg.float("missing_rate", 0.1))
    try:
        gen.validate()
    except CohortError as exc:
        raise ConfigError(str(exc)) from None
    cohort = generate(gen)
    paths = list(write_csv(cohort, out).values())
    gpath = out / "generator_config.txt"
    gpath.write_text(gen.to_kv(), encoding="utf-8")
    log.info("generated %d patients", cohort.num_patients)
    return paths + [gpath]


def cmd_train_teacher(cfg: RunConfig, out: Path) -> list[Path]:
    cohort = _prepared_cohort(cfg)
    seed = cfg.int("seed", 0)
    seeds = cfg.ints("teacher_seeds") or _seed_ints(seed, cfg.int("candidates", 1))
    outcome = cfg.get("outcome", "mortality")
    if outcome not in cohort.outcomes:
        raise ConfigError(f"cohort has no outcome {outcome!r}")
    fits = []
    for s in seeds:
        tcfg = TeacherConfig(
            hidden_dim=cfg.int("hidden_dim", 32),
            epochs=cfg.int("epochs", 15),
            batch_size=cfg.int("batch_size", 64),
            learning_rate=cfg.float("learning_rate", 1e-2),
            seed=s,
            outcome=outcome,
        )
        t0 = time.perf_counter()
        try:
            fits.append(train_teacher(cohort, tcfg))
        except ValueError as exc:
            raise DataError(str(exc)) from None
        log.info("teacher seed %d: val auroc %.4f (%.1fs)", s, fits[-1].best_val_auroc, time.perf_counter() - t0)
    best = max(range(len(fits)), key=lambda i: (fits[i].best_val_auroc, -i))
    board = out / "teacher_leaderboard.csv"
    _write_rows(board, ["seed", "best_epoch", "val_auroc", "selected"],
                [(f.config.seed, f.best_epoch, f.best_val_auroc, int(i == best)) for i, f in enumerate(fits)])
    chosen = fits[best]
    ckpt = out / "teacher.json"
    chosen.teacher.save(ckpt)
    feats = out / "teacher_features.csv"
    write_teacher_features(feats, teacher_features(chosen.teacher, cohort))
    report = out / "teacher_report.json"
    write_json(report, {"selected_seed": chosen.config.seed, "outcome": outcome, "best_epoch": chosen.best_epoch,
                        "val_auroc": chosen.best_val_auroc, "history": chosen.history})
    return [board, ckpt, feats, report]


def cmd_train_student(cfg: RunConfig, out: Path) -> list[Path]:
    variant = cfg.get("variant", "baseline")
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    teacher_path = cfg.path("teacher_features", required=False)
    if variant == "kd" and teacher_path is None:
        raise ConfigError("the kd variant needs teacher_features (a patient_id,f1..fC CSV)")
    cohort = _prepared_cohort(cfg)
    tr, va = cohort.indices("train"), cohort.indices("val")
    outcome = cfg.get("outcome", "mortality")
    y = np.asarray(cohort.outcomes[outcome])
    train_ids = [cohort.patient_ids[i] for i in tr]
    constraint = None
    if variant == "kd":
        try:
            tf = load_teacher_features(teacher_path)
            constraint = DistillationConstraint("kd", teacher_features=tf.aligned(train_ids),
                                                normalization=cfg.get("normalization", "row"))
        except (OSError, TeacherFeatureError) as exc:
            raise DataError(str(exc)) from None
    elif variant == "disc":
        constraint = DistillationConstraint("disc", labels=y[tr])

    seed = cfg.int("seed", 0)
    draws = cfg.int("draws", 1)
    if draws < 1:
        raise ConfigError("draws must be positive")
    sample = cfg.bool("sample_weights", draws > 1)
    children = np.random.SeedSequence(seed).spawn(draws)
    base_weights = _configured_weights(cfg, variant)
    board, best = [], None
    for i, child in enumerate(children):
        w_ss, fit_ss = child.spawn(2)
        weights = ObjectiveWeights.sample(np.random.default_rng(w_ss)) if sample else base_weights
        if variant == "baseline":
            weights = ObjectiveWeights(**{**weights.to_dict(), "similarity_coeff": 0.0, "discriminator_coeff": 0.0})
        run_seed = int(fit_ss.generate_state(1)[0])
        t0 = time.perf_counter()
        try:
            res = fit(cohort, _training_config(cfg, run_seed, weights), constraint)
            feats = res.features(cohort.student)
            val = _two_stage(feats[tr], y[tr], feats[va], y[va])
            status = "ok"
        except (FloatingPointError, NumericalError, np.linalg.LinAlgError) as exc:
            log.warning("draw %d failed: %s", i, exc)
            res, val, status = None, float("nan"), "failed"
        log.info("draw %d val auroc %s (%.1fs)", i, val, time.perf_counter() - t0)
        board.append([i, run_seed, status, val] + [weights.to_dict()[k] for k in COEFFS])
        if res is not None and (best is None or val > best[0]):
            best = (val, i, res)
    if best is None:
        raise FloatingPointError("every hyperparameter draw failed")
    val, index, res = best
    for row in board:
        row.append(int(row[0] == index))
    paths = [out / "student_draws.csv", out / "student.json", out / "training_trace.csv"]
    _write_rows(paths[0], ["draw", "seed", "status", "val_auroc", *COEFFS, "selected"], board)
    write_json(paths[1], res.to_dict())
    keys = [k for k in res.trace[0] if k != "seconds"]
    _write_rows(paths[2], keys, ([row[k] for k in keys] for row in res.trace))
    for row in res.trace:
        log.info("epoch %d took %.3fs", row["epoch"], row["seconds"])
    return paths


def cmd_evaluate(cfg: RunConfig, out: Path) -> list[Path]:
    cohort = _prepared_cohort(cfg)
    tr, te = cohort.indices("train"), cohort.indices("test")
    students = [Path(p) for p in kv.as_list(cfg.values, "students", [])]
    teacher_path = cfg.path("teacher", required=False)
    if not students and teacher_path is None:
        raise ConfigError("evaluate needs students (comma-separated checkpoints) and/or teacher")
    metrics: dict = {"auroc": {}, "test_log_likelihood": {}, "n_test": int(te.size)}
    paths = []
    test_ids = [cohort.patient_ids[i] for i in te]

    def per_outcome(feats) -> dict:
        res = {}
        for o in OUTCOMES:
            if o not in cohort.outcomes:
                continue
            keep = np.ones(cohort.num_patients, bool)
            if o in cohort.early_onset:
                keep = ~cohort.early_onset[o].astype(bool)
            ytr, yte = cohort.outcomes[o][tr][keep[tr]], cohort.outcomes[o][te][keep[te]]
            if np.unique(ytr).size < 2 or np.unique(yte).size < 2:
                res[o] = None
                continue
            res[o] = _two_stage(feats[tr][keep[tr]], ytr, feats[te][keep[te]], yte)
        return res

    names = []
    for sp in students:
        res = _load_student(sp)
        name = sp.stem if sp.stem != "student" else f"{res.variant}"
        if name in names:
            name = f"{name}_{len(names)}"
        names.append(name)
        feats = res.features(cohort.student)
        metrics["auroc"][name] = per_outcome(feats)
        metrics["test_log_likelihood"][name] = res.log_likelihood(cohort.student[te])
        sim = out / f"similarity_{name}.csv"
        write_similarity_csv(sim, similarity_matrix(feats[te]))
        paths.append(sim)
    if teacher_path is not None:
        teacher = RecurrentTeacher.load(teacher_path)
        h = teacher_features(teacher, cohort).features
        scores = per_outcome(h)
        y = cohort.outcomes.get("mortality")
        if y is not None:
            scores["mortality"] = auroc(teacher_predict(teacher, cohort.teacher[te]), y[te])
        metrics["auroc"]["teacher"] = scores
        sim = out / "similarity_teacher.csv"
        write_similarity_csv(sim, similarity_matrix(h[te]))
        paths.append(sim)
    ids = out / "similarity_patient_ids.csv"
    _write_rows(ids, ["patient_id"], ([pid] for pid in test_ids))
    table = out / "auroc_table.csv"
    models = list(metrics["auroc"])
    _write_rows(table, ["outcome", *models],
                ([o] + [metrics["auroc"][m].get(o) if metrics["auroc"][m].get(o) is not None else "" for m in models]
                 for o in OUTCOMES))
    mpath = out / "metrics.json"
    write_json(mpath, metrics)
    return paths + [ids, table, mpath]


def cmd_associate(cfg: RunConfig, out: Path) -> list[Path]:
    cohort = _prepared_cohort(cfg)
    res = _load_student(cfg.path("student"))
    outcome = cfg.get("outcome", "mortality")
    if outcome not in cohort.outcomes:
        raise ConfigError(f"cohort has no outcome {outcome!r}")
    subset = cfg.get("subset", "test")
    if subset not in ("train", "val", "test", "all"):
        raise ConfigError("subset must be train, val, test or all")
    eligible = cohort.for_outcome(outcome)
    if subset != "all":
        eligible = eligible.subset(eligible.split == subset)
    scale = cfg.float("scale", 100.0)
    paths_arr = batch_viterbi(res.params, eligible.student)
    F = state_distributions(paths_arr, res.params.num_states)
    y = eligible.outcomes[outcome]
    try:
        uni = univariate_odds_ratios(F, y, scale)
        multi = multivariate_odds_ratios(F, y, scale)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    p_uni, p_multi, p_traj = out / "univariate.csv", out / "multivariate.csv", out / "viterbi_paths.csv"
    write_association_csv(p_uni, uni)
    write_association_csv(p_multi, multi)
    r = res.params.ar_order
    _write_rows(p_traj, ["patient_id", "hour", "state"],
                ((pid, t + r, int(s)) for pid, row in zip(eligible.patient_ids, paths_arr) for t, s in enumerate(row)))
    return [p_uni, p_multi, p_traj]


COMMANDS = {
    "generate": cmd_generate,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "evaluate": cmd_evaluate,
    "associate": cmd_associate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdarhmm", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", required=True, help="existing output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true", dest="verbose_flag")
        return p

    g = common(sub.add_parser("generate", help="sample a synthetic cohort"))
    g.add_argument("--patients", type=int)
    g.add_argument("--preset", choices=("planted", "distill"))
    g.add_argument("--missing-rate", type=float, dest="missing_rate")
    g.add_argument("--generator-config", dest="generator_config")

    t = common(sub.add_parser("train-teacher", help="train GRU teachers and keep the best by validation AUROC"))
    t.add_argument("--cohort")
    t.add_argument("--teacher-seeds", dest="teacher_seeds", help="comma-separated seeds")
    t.add_argument("--candidates", type=int, help="number of seeds derived from --seed")
    t.add_argument("--epochs", type=int)
    t.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    t.add_argument("--outcome")

    s = common(sub.add_parser("train-student", help="fit AR-HMM students"))
    s.add_argument("--cohort")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--teacher-features", dest="teacher_features")
    s.add_argument("--draws", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--num-states", type=int, dest="num_states")
    s.add_argument("--learning-rate", type=float, dest="learning_rate")
    s.add_argument("--outcome")

    e = common(sub.add_parser("evaluate", help="AUROC, held-out log-likelihood and similarity matrices"))
    e.add_argument("--cohort")
    e.add_argument("--students", help="comma-separated student checkpoints")
    e.add_argument("--teacher", help="teacher checkpoint")

    a = common(sub.add_parser("associate", help="odds ratios of Viterbi state distributions"))
    a.add_argument("--cohort")
    a.add_argument("--student")
    a.add_argument("--outcome")
    a.add_argument("--scale", type=float)
    a.add_argument("--subset", choices=("train", "val", "test", "all"))
    return parser


def _setup_log(out: Path, verbose: bool) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    if verbose:
        stream = logging.StreamHandler(sys.stderr)
        stream.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        root.addHandler(stream)
    return handler


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out)
    if not out.is_dir():
        print(f"error: output directory {out} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    verbose = bool(args.verbose_flag)
    del args.verbose_flag
    handler = _setup_log(out, verbose)
    t0 = time.perf_counter()
    try:
        cfg = RunConfig.resolve(args)
        artifacts = COMMANDS[args.command](cfg, out)
        _write_manifest(out, args.command, cfg, artifacts)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
        return 0
    except (ConfigError, kv.ConfigError) as exc:
        return _fail(f"configuration error: {exc}", EXIT_CONFIG)
    except (DataError, CohortError, TeacherFeatureError) as exc:
        return _fail(f"data error: {exc}", EXIT_DATA)
    except (FloatingPointError, NumericalError, np.linalg.LinAlgError) as exc:
        return _fail(f"numerical failure: {exc}", EXIT_NUMERIC)
    except (ValueError, OSError) as exc:
        return _fail(f"data error: {exc}", EXIT_DATA)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def _fail(message: str, code: int) -> int:
    log.error(message)
    print(message, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
