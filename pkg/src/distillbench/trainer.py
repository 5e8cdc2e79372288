"""Teacher pre-training, distillation in every mode, evaluation and sweeps.

Each distillation mode is a *head*: an object that turns the student's
features/logits and the frozen teacher's features/logits into a loss, the
gradients flowing back into the student, and gradients for its own
parameters (projectors). The training loop itself is mode-agnostic.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .datasets import Dataset, minibatches
from .losses import (LossValue, ce_loss, da_loss, kl_loss, mda_loss, mkl_loss,
                     total_feature_loss, total_logit_loss)
from .netcore import SGD, Network, backward, forward, mlp_specs
from .numkit import SeededRng
from .projectors import (ARCHS, LogitProjector, Projector, ProjectorEnsemble, build_ensemble,
                         ensemble_backward, ensemble_project, project, project_backward,
                         project_logits, project_logits_backward)

MODES = ("none", "feature", "feature_noproj", "logit", "logit_proj")
SWEEP_AXES = {"alpha": "alpha", "beta": "beta", "q": "q", "arch": "proj_arch",
              "activation": "proj_activation", "init": "proj_init"}


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"non-finite loss in epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden: tuple[int, ...]
    n_classes: int
    activation: str = "relu"

    def layers(self):
        return mlp_specs(self.input_dim, self.hidden, self.n_classes, self.activation)

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim


@dataclass
class DistillConfig:
    mode: str = "feature"
    alpha: float = 25.0
    beta: float = 0.5
    mu: float = 4.0
    mu_sq_grad: bool = True
    q: int = 3
    proj_arch: str = "1L"
    proj_activation: str = "relu"
    proj_init: str = "fan_in_uniform"
    proj_weight_decay: bool = True
    logit_proj_noise: float = 0.01
    freeze_logit_proj: bool = False
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    lr_drop_epochs: tuple[int, ...] = ()
    lr_drop_factor: float = 0.1
    batch_size: int = 64
    seed: int = 0
    es_epoch: int | None = None
    cka_every: int = 0
    cka_kind: str = "linear"

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        problems = self.problems()
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.mode not in MODES:
            out.append(f"mode={self.mode!r} not in {MODES}")
        if self.alpha < 0:
            out.append("alpha must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            out.append("beta must lie in [0, 1]")
        if not self.mu > 0:
            out.append("mu must be > 0")
        if self.q < 1:
            out.append("q must be >= 1")
        if self.proj_arch not in ARCHS:
            out.append(f"proj_arch={self.proj_arch!r} not in {ARCHS}")
        if self.proj_activation not in ("relu", "gelu", "none"):
            out.append(f"proj_activation={self.proj_activation!r} not in ('relu', 'gelu', 'none')")
        if self.proj_init not in ("fan_in_uniform", "he", "orthogonal", "mixed"):
            out.append(f"proj_init={self.proj_init!r} unknown")
        if not self.lr > 0:
            out.append("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            out.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.es_epoch is not None and not 0 <= self.es_epoch <= self.epochs:
            out.append("es_epoch must lie in [0, epochs]")
        if self.cka_every < 0:
            out.append("cka_every must be >= 0")
        if self.cka_kind not in ("linear", "rbf"):
            out.append("cka_kind must be 'linear' or 'rbf'")
        return out

    def replace(self, **changes) -> "DistillConfig":
        return dataclasses.replace(self, **changes)


def lr_at(config: DistillConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: one drop for every milestone already passed."""
    drops = sum(1 for e in config.lr_drop_epochs if epoch > e)
    return config.lr * config.lr_drop_factor ** drops


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    test_acc: float
    ce: float
    distill: float
    total: float
    cka: float | None = None
    wall: float = 0.0


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    CSV_HEADER = ("epoch", "train_acc", "test_acc", "ce", "distill", "total", "cka")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    def to_rows(self) -> list[list[str]]:
        rows = []
        for r in self.records:
            rows.append([str(r.epoch), repr(r.train_acc), repr(r.test_acc), repr(r.ce),
                         repr(r.distill), repr(r.total), "" if r.cka is None else repr(r.cka)])
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_HEADER)
            w.writerows(self.to_rows())

    def cka_report(self, kind: str = "linear") -> analysis.CkaReport:
        return analysis.CkaReport(kind, [(r.epoch, r.cka) for r in self.records if r.cka is not None])


@dataclass
class EvalResult:
    accuracy: float
    logits: np.ndarray
    features: np.ndarray
    labels: np.ndarray


def evaluate(net: Network, ds: Dataset) -> EvalResult:
    S, Z, _ = forward(net, ds.X)
    acc = float(np.mean(Z.argmax(axis=0) == ds.labels)) if ds.n else 0.0
    return EvalResult(acc, Z, S, ds.labels)


# -- heads --------------------------------------------------------------------

class Head:
    """Cross-entropy only; base class for the distillation heads."""

    owner = None

    def params(self) -> list[np.ndarray]:
        return []

    def compute(self, S, Z, T, P, y, active: bool):
        """Return (loss, dS, dZ, grads for ``params()``)."""
        ce = ce_loss(Z, y)
        loss = LossValue(ce.value, ce.grads, {"ce": ce.value, "distill": 0.0})
        return loss, None, ce.grads["logits"], [np.zeros_like(p) for p in self.params()]


class IdentityFeatureHead(Head):
    """Direction alignment on the raw student features (needs d == m)."""

    def __init__(self, alpha: float):
        self.alpha = alpha

    def compute(self, S, Z, T, P, y, active):
        if not active:
            return super().compute(S, Z, T, P, y, active)
        loss = total_feature_loss(ce_loss(Z, y), da_loss(S, T), self.alpha)
        return loss, loss.grads["projected"], loss.grads["logits"], []


class SingleProjectorHead(Head):
    def __init__(self, projector: Projector, alpha: float):
        self.projector = projector
        self.alpha = alpha
        self.owner = projector

    def params(self):
        return self.projector.weights

    def compute(self, S, Z, T, P, y, active):
        if not active:
            return super().compute(S, Z, T, P, y, active)
        G, tape = project(self.projector, S)
        loss = total_feature_loss(ce_loss(Z, y), da_loss(G, T), self.alpha)
        grads, dS = project_backward(tape, loss.grads["projected"])
        return loss, dS, loss.grads["logits"], grads


class EnsembleHead(Head):
    def __init__(self, ensemble: ProjectorEnsemble, alpha: float):
        self.ensemble = ensemble
        self.alpha = alpha
        self.owner = ensemble

    def params(self):
        return self.ensemble.params()

    def compute(self, S, Z, T, P, y, active):
        if not active:
            return super().compute(S, Z, T, P, y, active)
        F, tape = ensemble_project(self.ensemble, S)
        loss = total_feature_loss(ce_loss(Z, y), mda_loss(F, T), self.alpha)
        member_grads, dS = ensemble_backward(self.ensemble, tape, loss.grads["projected"])
        return loss, dS, loss.grads["logits"], [g for grads in member_grads for g in grads]


class LogitHead(Head):
    def __init__(self, beta: float, mu: float, mu_sq_grad: bool):
        self.beta, self.mu, self.mu_sq_grad = beta, mu, mu_sq_grad

    def compute(self, S, Z, T, P, y, active):
        if not active:
            return super().compute(S, Z, T, P, y, active)
        loss = total_logit_loss(ce_loss(Z, y), kl_loss(P, Z, self.mu, self.mu_sq_grad), self.beta)
        return loss, None, loss.grads["logits"], []


class LogitProjectorHead(Head):
    def __init__(self, lp: LogitProjector, beta: float, mu: float, mu_sq_grad: bool, frozen: bool = False):
        self.lp = lp
        self.beta, self.mu, self.mu_sq_grad, self.frozen = beta, mu, mu_sq_grad, frozen
        self.owner = lp

    def params(self):
        return [] if self.frozen else self.lp.params()

    def compute(self, S, Z, T, P, y, active):
        if not active:
            return super().compute(S, Z, T, P, y, active)
        V = project_logits(self.lp, Z)
        loss = total_logit_loss(ce_loss(Z, y), mkl_loss(P, V, self.mu, self.mu_sq_grad), self.beta)
        dW, dZ_proj = project_logits_backward(self.lp, Z, loss.grads["projected_logits"])
        dZ = loss.grads["logits"] + dZ_proj
        return loss, None, dZ, ([] if self.frozen else [dW])


def make_head(config: DistillConfig, d: int, m: int, c: int) -> Head:
    root = SeededRng(config.seed)
    if config.mode == "none":
        return Head()
    if config.mode == "feature":
        base_seed = root.derive("projectors").integer()
        ens = build_ensemble(d, m, config.q, config.proj_arch, config.proj_activation,
                             config.proj_init, base_seed)
        return EnsembleHead(ens, config.alpha)
    if config.mode == "feature_noproj":
        if d != m:
            raise ConfigError(f"mode feature_noproj needs equal feature dims, student d={d} vs teacher m={m}")
        return IdentityFeatureHead(config.alpha)
    if config.mode == "logit":
        return LogitHead(config.beta, config.mu, config.mu_sq_grad)
    lp = LogitProjector.init(c, root.derive("logit-projector"),
                             0.0 if config.freeze_logit_proj else config.logit_proj_noise)
    return LogitProjectorHead(lp, config.beta, config.mu, config.mu_sq_grad, config.freeze_logit_proj)


# -- training loop ------------------------------------------------------------

@dataclass
class DistillResult:
    student: Network
    log: TrainLog
    head: Head

    @property
    def projector(self):
        return getattr(self.head, "ensemble", None) or getattr(self.head, "lp", None) \
            or getattr(self.head, "projector", None)

    def __iter__(self):
        return iter((self.student, self.log))


def init_student(spec: NetSpec, config: DistillConfig) -> Network:
    return Network.init(spec.layers(), SeededRng(config.seed).derive("student-init"), seed=config.seed)


def _fit(student: Network, teacher: Network | None, head: Head, train: Dataset, test: Dataset | None,
         config: DistillConfig) -> TrainLog:
    opt = SGD(config.momentum)
    opt.add_group(student.params(), config.weight_decay, owner=student)
    head_params = head.params()
    if head_params:
        opt.add_group(head_params, config.weight_decay if config.proj_weight_decay else 0.0, owner=head.owner)
    shuffle_rng = SeededRng(config.seed).derive("shuffle")
    teacher_feats = None
    if teacher is not None and config.cka_every:
        teacher_feats = evaluate(teacher, train).features

    log = TrainLog()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at(config, epoch)
        active = config.mode != "none" and (config.es_epoch is None or epoch <= config.es_epoch)
        sums = {"ce": 0.0, "distill": 0.0, "total": 0.0}
        for idx in minibatches(train.n, config.batch_size, shuffle_rng):
            X, y = train.X[:, idx], train.labels[idx]
            T = P = None
            if teacher is not None and active:
                T, P, _ = forward(teacher, X)
            S, Z, tape = forward(student, X)
            try:
                loss, dS, dZ, hgrads = head.compute(S, Z, T, P, y, active)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            grads = backward(tape, dZ, dS)
            opt.step([grads, hgrads] if head_params else [grads], lr)
            w = idx.size
            sums["ce"] += w * loss.parts["ce"]
            sums["distill"] += w * loss.parts["distill"]
            sums["total"] += w * loss.value
        student.epoch = epoch
        n = max(train.n, 1)
        rec = EpochRecord(epoch, evaluate(student, train).accuracy,
                          evaluate(student, test).accuracy if test is not None else float("nan"),
                          sums["ce"] / n, sums["distill"] / n, sums["total"] / n)
        if not np.isfinite(rec.total):
            raise TrainingDiverged(epoch)
        if teacher_feats is not None and (epoch % config.cka_every == 0 or epoch == config.epochs):
            S_all = evaluate(student, train).features
            rec.cka = (analysis.linear_cka(S_all, teacher_feats) if config.cka_kind == "linear"
                       else analysis.rbf_cka(S_all, teacher_feats))
        rec.wall = time.perf_counter() - t0
        log.records.append(rec)
    return log


def train_teacher(spec: NetSpec, train: Dataset, test: Dataset | None, config: DistillConfig
                  ) -> tuple[Network, TrainLog]:
    """Cross-entropy training with the configured SGD schedule."""
    if config.mode != "none":
        raise ConfigError("train_teacher requires mode='none'")
    net = init_student(spec, config)
    log = _fit(net, None, Head(), train, test, config)
    return net, log


def distill(teacher: Network, student_spec: NetSpec, train: Dataset, test: Dataset | None,
            config: DistillConfig, head: Head | None = None) -> DistillResult:
    """Train a student against a frozen teacher; the head is built from ``config.mode`` unless given."""
    if teacher.input_dim != student_spec.input_dim:
        raise ConfigError("teacher and student disagree on input dim")
    if teacher.n_classes != student_spec.n_classes:
        raise ConfigError("teacher and student disagree on class count")
    if head is None:
        head = make_head(config, student_spec.feature_dim, teacher.feature_dim, student_spec.n_classes)
    student = init_student(student_spec, config)
    log = _fit(student, teacher, head, train, test, config)
    return DistillResult(student, log, head)


# -- sweeps -------------------------------------------------------------------

@dataclass
class SweepRow:
    axis_value: object
    final_train_acc: float
    final_test_acc: float
    result: DistillResult | None = None


def run_sweep(teacher: Network, student_spec: NetSpec, train: Dataset, test: Dataset,
              base: DistillConfig, axis: str, values: list) -> list[SweepRow]:
    """One distillation per value; every run shares ``base.seed`` so student inits coincide."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {tuple(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = []
    for v in values:
        cfg = base.replace(**{SWEEP_AXES[axis]: v})
        res = distill(teacher, student_spec, train, test, cfg)
        last = res.log.records[-1] if res.log.records else None
        rows.append(SweepRow(v, last.train_acc if last else float("nan"),
                             last.test_acc if last else float("nan"), res))
    return rows


def sweep_to_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis_value", "final_train_acc", "final_test_acc"])
        for r in rows:
            w.writerow([r.axis_value, repr(r.final_train_acc), repr(r.final_test_acc)])
