"""Command-line entry point: ``distillbench <command> [--config FILE] [--key value ...]``.

Every run is described by a flat ``key=value`` configuration. A config file
supplies a base, individual ``--key value`` flags override it, and the fully
resolved result is written to ``manifest.txt`` in the output directory so the
run can be repeated with ``--config manifest.txt``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .datasets import DataError, Dataset, gen_gaussian_mixture, load_csv, save_csv, split
from .losses import decompose_batch
from .netcore import CheckpointError, load_checkpoint, read_param_file, save_checkpoint, write_param_file
from .projectors import Projector, project
from .trainer import (SWEEP_AXES, ConfigError, DistillConfig, EnsembleHead, LogitProjectorHead, NetSpec,
                      TrainingDiverged, distill, evaluate, run_sweep, sweep_to_csv, train_teacher)

OUT_ENV = "DISTILLBENCH_OUT"
COMMANDS = ("gen-data", "train-teacher", "distill", "sweep")


# -- value codecs -------------------------------------------------------------

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_str(text: str):
    return None if text.strip().lower() in ("", "none") else text.strip()


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    # data: generated unless train_csv is given
    "train_csv": (_opt_str, None),
    "test_csv": (_opt_str, None),
    "classes": (int, 10),
    "dim": (int, 16),
    "per_class": (int, 100),
    "spread": (float, 0.15),
    "modes": (int, 3),
    "data_seed": (int, 0),
    "train_fraction": (float, 0.5),
    # networks
    "teacher_hidden": (_int_list, (64, 64)),
    "student_hidden": (_int_list, (32, 64)),
    "net_activation": (str, "relu"),
    "teacher": (_opt_str, None),
    # training (mirrors DistillConfig)
    "mode": (str, "feature"),
    "alpha": (float, 25.0),
    "beta": (float, 0.5),
    "mu": (float, 4.0),
    "mu_sq_grad": (_bool, True),
    "q": (int, 3),
    "proj_arch": (str, "1L"),
    "proj_activation": (str, "relu"),
    "proj_init": (str, "fan_in_uniform"),
    "proj_weight_decay": (_bool, True),
    "logit_proj_noise": (float, 0.01),
    "freeze_logit_proj": (_bool, False),
    "lr": (float, 0.05),
    "momentum": (float, 0.9),
    "weight_decay": (float, 5e-4),
    "epochs": (int, 100),
    "lr_drop_epochs": (_int_list, (75,)),
    "lr_drop_factor": (float, 0.1),
    "batch_size": (int, 32),
    "seed": (int, 0),
    "es_epoch": (_opt_int, None),
    "cka_every": (int, 0),
    "cka_kind": (str, "linear"),
    # analysis and sweeps
    "ece_bins": (int, 15),
    "affinity_top_n": (int, 2),
    "rbf_fraction": (float, 0.5),
    "axis": (_opt_str, None),
    "values": (_str_list, ()),
    "out": (_opt_str, None),
}

TRAIN_KEYS = ("mode", "alpha", "beta", "mu", "mu_sq_grad", "q", "proj_arch", "proj_activation", "proj_init",
              "proj_weight_decay", "logit_proj_noise", "freeze_logit_proj", "lr", "momentum", "weight_decay",
              "epochs", "lr_drop_epochs", "lr_drop_factor", "batch_size", "seed", "es_epoch", "cka_every",
              "cka_kind")


class UsageError(ValueError):
    """Configuration problems; the message lists every offending key."""


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    raw, bad = {}, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            bad.append(f"{path}:{lineno}: expected key=value")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key.replace("-", "_")] = value
    unknown = sorted(k for k in raw if k not in SCHEMA)
    bad += [f"unknown key {k!r}" for k in unknown]
    if bad:
        raise UsageError("; ".join(bad))
    return raw


def resolve(raw: dict[str, str]) -> dict:
    """Typed config from defaults overlaid with ``raw`` strings; all problems reported together."""
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    problems = []
    for key, text in raw.items():
        if key not in SCHEMA:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            cfg[key] = SCHEMA[key][0](text)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise UsageError("; ".join(problems))
    return cfg


def distill_config(cfg: dict, **overrides) -> DistillConfig:
    values = {k: cfg[k] for k in TRAIN_KEYS}
    values.update(overrides)
    return DistillConfig(**values)


def validate(cfg: dict, command: str) -> list[str]:
    problems = []
    try:
        distill_config(cfg, **({"mode": "none"} if command == "train-teacher" else {}))
    except ConfigError as exc:
        problems.extend(str(exc).removeprefix("invalid config: ").split("; "))
    for key in ("classes", "dim", "per_class", "modes", "ece_bins", "affinity_top_n"):
        if cfg[key] < 1:
            problems.append(f"{key} must be >= 1")
    if not cfg["spread"] > 0:
        problems.append("spread must be > 0")
    if not 0 < cfg["train_fraction"] < 1:
        problems.append("train_fraction must lie in (0, 1)")
    if not cfg["rbf_fraction"] > 0:
        problems.append("rbf_fraction must be > 0")
    if cfg["test_csv"] and not cfg["train_csv"]:
        problems.append("test_csv given without train_csv")
    for key in ("train_csv", "test_csv"):
        if cfg[key] and not Path(cfg[key]).is_file():
            problems.append(f"{key}: no such file {cfg[key]!r}")
    if command in ("distill", "sweep"):
        if not cfg["teacher"]:
            problems.append("teacher: a teacher checkpoint is required")
        elif not Path(cfg["teacher"]).is_file():
            problems.append(f"teacher: checkpoint {cfg['teacher']!r} does not exist")
    if command == "sweep":
        if cfg["axis"] not in SWEEP_AXES:
            problems.append(f"axis must be one of {tuple(SWEEP_AXES)}")
        if not cfg["values"]:
            problems.append("values: need at least one sweep value")
        else:
            try:
                sweep_values(cfg)
            except ValueError as exc:
                problems.append(f"values: {exc}")
    out = Path(cfg["out"])
    if out.exists() and not out.is_dir():
        problems.append(f"out: {cfg['out']!r} exists and is not a directory")
    return problems


def sweep_values(cfg: dict) -> list:
    axis = cfg["axis"]
    conv = {"alpha": float, "beta": float, "q": int}.get(axis, str)
    return [conv(v) for v in cfg["values"]]


def write_manifest(cfg: dict, command: str, path) -> None:
    lines = [f"# distillbench {command}"] + [f"{k}={_fmt(cfg[k])}" for k in SCHEMA]
    Path(path).write_text("\n".join(lines) + "\n")


# -- data and snapshots -------------------------------------------------------

def load_data(cfg: dict) -> tuple[Dataset, Dataset | None]:
    if cfg["train_csv"]:
        probe = [load_csv(cfg["train_csv"], has_header=True)]
        if cfg["test_csv"]:
            probe.append(load_csv(cfg["test_csv"], has_header=True))
        c = max(d.n_classes for d in probe)
        train = load_csv(cfg["train_csv"], has_header=True, n_classes=c)
        test = load_csv(cfg["test_csv"], has_header=True, n_classes=c) if cfg["test_csv"] else None
        return train, test
    ds = gen_gaussian_mixture(cfg["classes"], cfg["dim"], cfg["per_class"], cfg["spread"], cfg["data_seed"],
                              cfg["modes"])
    return split(ds, cfg["train_fraction"], cfg["data_seed"])


def save_snapshot(matrix: np.ndarray, labels: np.ndarray, n_classes: int, path) -> None:
    """Rows are samples; columns are features (or logits) followed by the label."""
    save_csv(Dataset(matrix, labels, n_classes), path)


def load_snapshot(path) -> Dataset:
    return load_csv(path, has_header=True)


def save_projector_sidecar(head, path, seed: int, epoch: int) -> bool:
    if isinstance(head, EnsembleHead):
        e = head.ensemble
        spec = f"ensemble q={e.q} activation={e.members[0].activation}"
        write_param_file(path, spec, seed, epoch, e.named_params())
        return True
    if isinstance(head, LogitProjectorHead):
        write_param_file(path, "logit", seed, epoch, [("logit_proj.weight", head.lp.W_hat)])
        return True
    return False


def load_projector_sidecar(path) -> list[Projector]:
    spec, _, _, tensors = read_param_file(path)
    kv = dict(tok.split("=", 1) for tok in spec.split()[1:] if "=" in tok)
    if not spec.startswith("ensemble"):
        raise CheckpointError(f"{path}: line 2: not a feature projector ensemble")
    q, activation = int(kv["q"]), kv["activation"]
    members = []
    for k in range(q):
        layers = sorted((int(n.split(".")[3]), t) for n, t in tensors.items() if n.startswith(f"proj.{k}.layer."))
        if not layers:
            raise CheckpointError(f"{path}: missing tensors for projector {k}")
        members.append(Projector([t for _, t in layers], activation))
    return members


# -- commands -----------------------------------------------------------------

def _prepare(cfg: dict, command: str) -> Path:
    if cfg["out"] is None:
        cfg["out"] = str(Path(os.environ.get(OUT_ENV, "runs")) / command)
    problems = validate(cfg, command)
    if problems:
        raise UsageError("; ".join(problems))
    for key in ("train_csv", "test_csv", "teacher"):
        if cfg[key]:
            cfg[key] = str(Path(cfg[key]).resolve())
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(cfg, command, out / "manifest.txt")
    return out


def _nets(cfg: dict, train: Dataset) -> tuple[NetSpec, NetSpec]:
    t = NetSpec(train.dim, tuple(cfg["teacher_hidden"]), train.n_classes, cfg["net_activation"])
    s = NetSpec(train.dim, tuple(cfg["student_hidden"]), train.n_classes, cfg["net_activation"])
    return t, s


def cmd_gen_data(cfg: dict) -> None:
    out = _prepare(cfg, "gen-data")
    train, test = load_data(cfg)
    save_csv(train, out / "train.csv")
    save_csv(test, out / "test.csv")


def cmd_train_teacher(cfg: dict) -> None:
    out = _prepare(cfg, "train-teacher")
    train, test = load_data(cfg)
    spec, _ = _nets(cfg, train)
    net, log = train_teacher(spec, train, test, distill_config(cfg, mode="none"))
    save_checkpoint(net, out / "teacher.ckpt")
    log.to_csv(out / "trainlog.csv")
    _snapshots(net, "teacher", train, test, out, cfg)


def _snapshots(net, who: str, train: Dataset, test: Dataset | None, out: Path, cfg: dict) -> None:
    ev = evaluate(net, train)
    save_snapshot(ev.features, train.labels, train.n_classes, out / f"{who}_train_features.csv")
    save_snapshot(ev.logits, train.labels, train.n_classes, out / f"{who}_train_logits.csv")
    if test is not None:
        ev = evaluate(net, test)
        save_snapshot(ev.logits, test.labels, test.n_classes, out / f"{who}_test_logits.csv")
        analysis.calibration(ev.logits, test.labels, cfg["ece_bins"]).to_csv(out / f"{who}_reliability.csv")


def _load_teacher(cfg: dict, train: Dataset):
    teacher = load_checkpoint(cfg["teacher"])
    if teacher.input_dim != train.dim or teacher.n_classes != train.n_classes:
        raise UsageError(f"teacher: checkpoint expects {teacher.input_dim} inputs and {teacher.n_classes} "
                         f"classes, data has {train.dim} and {train.n_classes}")
    return teacher


def cmd_distill(cfg: dict) -> None:
    out = _prepare(cfg, "distill")
    train, test = load_data(cfg)
    teacher = _load_teacher(cfg, train)
    _, spec = _nets(cfg, train)
    res = distill(teacher, spec, train, test, distill_config(cfg))
    save_checkpoint(res.student, out / "student.ckpt")
    save_projector_sidecar(res.head, out / "projectors.txt", cfg["seed"], res.student.epoch)
    res.log.to_csv(out / "trainlog.csv")
    report = res.log.cka_report(cfg["cka_kind"])
    if report.values:
        report.to_csv(out / "cka.csv")
    _snapshots(res.student, "student", train, test, out, cfg)
    _snapshots(teacher, "teacher", train, test, out, cfg)


def cmd_sweep(cfg: dict) -> None:
    out = _prepare(cfg, "sweep")
    train, test = load_data(cfg)
    teacher = _load_teacher(cfg, train)
    _, spec = _nets(cfg, train)
    rows = run_sweep(teacher, spec, train, test, distill_config(cfg), cfg["axis"], sweep_values(cfg))
    sweep_to_csv(rows, out / "sweep.csv")
    for r in rows:
        r.result.log.to_csv(out / f"trainlog_{cfg['axis']}_{r.axis_value}.csv")


# -- analyze ------------------------------------------------------------------

def analyze(args) -> None:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.analysis == "cka":
        a, b = load_snapshot(args.a), load_snapshot(args.b)
        if args.kind == "linear":
            value = analysis.linear_cka(a.X, b.X)
        else:
            value = analysis.rbf_cka(a.X, b.X, args.rbf_fraction)
        analysis.write_csv(out, ["kind", "cka"], [[args.kind, value]])
    elif args.analysis == "ece":
        snap = load_snapshot(args.logits)
        analysis.calibration(snap.X, snap.labels, args.bins).to_csv(out)
    elif args.analysis == "decompose":
        p, z = load_snapshot(args.teacher_logits), load_snapshot(args.student_logits)
        if p.X.shape != z.X.shape or not np.array_equal(p.labels, z.labels):
            raise UsageError("teacher and student logit snapshots do not cover the same samples")
        res = decompose_batch(p.X, z.X, args.mu, p.labels)
        analysis.write_csv(out, list(res), [list(res.values())])
    else:
        student, teacher = load_checkpoint(args.student), load_checkpoint(args.teacher)
        members = load_projector_sidecar(args.projectors)
        data = load_csv(args.data, has_header=True, n_classes=teacher.n_classes)
        S, T = evaluate(student, data).features, evaluate(teacher, data).features
        outputs = [project(m, S)[0] for m in members]
        analysis.class_affinity(outputs, T, data.labels, args.top_n).to_csv(out)


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value file; flags override it")
        for key, (_, default) in SCHEMA.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=argparse.SUPPRESS,
                           metavar="V", help=f"default {_fmt(default)}")
    an = sub.add_parser("analyze")
    asub = an.add_subparsers(dest="analysis", required=True)
    p = asub.add_parser("cka", help="CKA between two feature snapshots")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--kind", choices=("linear", "rbf"), default="linear")
    p.add_argument("--rbf-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p = asub.add_parser("ece", help="reliability table from a logit snapshot")
    p.add_argument("--logits", required=True)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--out", required=True)
    p = asub.add_parser("decompose", help="target / non-target split of the logit distillation loss")
    p.add_argument("--teacher-logits", required=True)
    p.add_argument("--student-logits", required=True)
    p.add_argument("--mu", type=float, default=4.0)
    p.add_argument("--out", required=True)
    p = asub.add_parser("affinity", help="per-projector best-aligned classes")
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--projectors", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--top-n", type=int, default=2)
    p.add_argument("--out", required=True)
    return parser


def config_from_args(args) -> dict:
    raw = read_config_file(args.config) if args.config else {}
    raw.update({k: v for k, v in vars(args).items() if k in SCHEMA})
    return resolve(raw)


HANDLERS = {"gen-data": cmd_gen_data, "train-teacher": cmd_train_teacher, "distill": cmd_distill,
            "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "analyze":
            analyze(args)
        else:
            HANDLERS[args.command](config_from_args(args))
    except UsageError as exc:
        print(f"distillbench: config error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, CheckpointError, TrainingDiverged, analysis.DegenerateInputError,
            FileNotFoundError) as exc:
        print(f"distillbench: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
