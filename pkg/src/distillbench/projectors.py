"""Student-side projectors used only during distillation.

A projector is a bias-free chain ``g(s) = act(W_L ... act(W_1 s))``. An
ensemble averages the post-activation outputs of ``q`` independently seeded
members. The logit projector is a plain ``c x c`` linear map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import ACTIVATIONS, Tape, activate, activation_grad
from .numkit import INIT_STRATEGIES, SeededRng, init_matrix

ARCHS = ("1L", "2L", "3L", "4L", "2Lx2", "2Lx3")


def arch_dims(arch: str, d: int, m: int) -> list[tuple[int, int]]:
    """(in, out) pairs for each layer of a projector architecture."""
    if arch not in ARCHS:
        raise ValueError(f"unknown projector arch {arch!r}; expected one of {ARCHS}")
    if arch.startswith("2Lx"):
        h = int(arch[3:]) * m
        return [(d, h), (h, m)]
    depth = int(arch[0])
    return [(d, m)] + [(m, m)] * (depth - 1)


class Projector:
    def __init__(self, weights: list[np.ndarray], activation: str = "relu"):
        if not weights:
            raise ValueError("projector needs at least one layer")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        for a, b in zip(weights[:-1], weights[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError(f"projector layers do not chain: {a.shape} -> {b.shape}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.activation = activation
        self.version = 0

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def touch(self) -> None:
        self.version += 1


def project(p: Projector, S: np.ndarray) -> tuple[np.ndarray, Tape]:
    if S.ndim != 2 or S.shape[0] != p.in_dim:
        raise ValueError(f"features have shape {S.shape}, projector expects {p.in_dim} rows")
    tape = Tape(p, p.version)
    a = S
    for w in p.weights:
        pre = w @ a
        tape.inputs.append(a)
        tape.pre.append(pre)
        a = activate(pre, p.activation)
    return a, tape


def project_backward(tape: Tape, dG: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Weight gradients of one projector and the gradient wrt its input."""
    tape.check()
    p: Projector = tape.owner
    tape.consumed = True
    grads = [None] * len(p.weights)
    dA = dG
    for j in range(len(p.weights) - 1, -1, -1):
        dpre = dA * activation_grad(tape.pre[j], p.activation)
        grads[j] = dpre @ tape.inputs[j].T
        dA = p.weights[j].T @ dpre
    return grads, dA


class ProjectorEnsemble:
    def __init__(self, members: list[Projector]):
        if not members:
            raise ValueError("ensemble needs at least one projector")
        shapes = [tuple(w.shape for w in m.weights) for m in members]
        if any(s != shapes[0] for s in shapes) or any(m.activation != members[0].activation for m in members):
            raise ValueError("ensemble members must share architecture")
        self.members = members
        self.version = 0

    @property
    def q(self) -> int:
        return len(self.members)

    @property
    def in_dim(self) -> int:
        return self.members[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.members[0].out_dim

    def params(self) -> list[np.ndarray]:
        return [w for m in self.members for w in m.weights]

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        return [(f"proj.{k}.layer.{j}", w) for k, m in enumerate(self.members) for j, w in enumerate(m.weights)]

    def touch(self) -> None:
        self.version += 1
        for m in self.members:
            m.touch()


@dataclass
class EnsembleTape:
    owner: ProjectorEnsemble
    version: int
    member_tapes: list[Tape]
    outputs: list[np.ndarray]


def ensemble_project(e: ProjectorEnsemble, S: np.ndarray) -> tuple[np.ndarray, EnsembleTape]:
    """Mean of the member outputs, plus a tape that also keeps each member's output."""
    if not e.members:
        raise ValueError("empty ensemble")
    outs, tapes = [], []
    for m in e.members:
        g, t = project(m, S)
        outs.append(g)
        tapes.append(t)
    F = outs[0].copy()
    for g in outs[1:]:
        F += g
    F *= 1.0 / e.q
    return F, EnsembleTape(e, e.version, tapes, outs)


def ensemble_backward(e: ProjectorEnsemble, tape: EnsembleTape, dF: np.ndarray
                      ) -> tuple[list[list[np.ndarray]], np.ndarray]:
    if tape.owner is not e or tape.version != e.version:
        raise RuntimeError("stale ensemble tape")
    dG = dF * (1.0 / e.q)
    member_grads = []
    dS = None
    for t in tape.member_tapes:
        grads, ds = project_backward(t, dG)
        member_grads.append(grads)
        dS = ds if dS is None else dS + ds
    return member_grads, dS


def build_ensemble(d: int, m: int, q: int, arch: str = "1L", activation: str = "relu",
                   init: str = "fan_in_uniform", base_seed: int = 0) -> ProjectorEnsemble:
    """Member ``k`` draws its weights from seed ``base_seed + k``.

    ``init="mixed"`` cycles fan_in_uniform, he, orthogonal across members.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if init != "mixed" and init not in INIT_STRATEGIES:
        raise ValueError(f"unknown init strategy {init!r}")
    dims = arch_dims(arch, d, m)
    members = []
    for k in range(q):
        strategy = INIT_STRATEGIES[k % len(INIT_STRATEGIES)] if init == "mixed" else init
        rng = SeededRng(base_seed + k)
        members.append(Projector([init_matrix(o, i, strategy, rng) for i, o in dims], activation))
    return ProjectorEnsemble(members)


class LogitProjector:
    def __init__(self, W_hat: np.ndarray):
        W_hat = np.asarray(W_hat, dtype=np.float64)
        if W_hat.ndim != 2 or W_hat.shape[0] != W_hat.shape[1]:
            raise ValueError(f"logit projector must be square, got {W_hat.shape}")
        self.W_hat = W_hat
        self.version = 0

    @classmethod
    def init(cls, c: int, rng: SeededRng, noise: float = 0.01) -> "LogitProjector":
        """Identity plus ``noise`` times a fan-in uniform draw."""
        W = np.eye(c)
        if noise:
            W = W + noise * init_matrix(c, c, "fan_in_uniform", rng)
        return cls(W)

    @property
    def n_classes(self) -> int:
        return self.W_hat.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.W_hat]

    def touch(self) -> None:
        self.version += 1


def project_logits(lp: LogitProjector, Z: np.ndarray) -> np.ndarray:
    if Z.ndim != 2 or Z.shape[0] != lp.n_classes:
        raise ValueError(f"logits have shape {Z.shape}, projector expects {lp.n_classes} rows")
    return lp.W_hat @ Z


def project_logits_backward(lp: LogitProjector, Z: np.ndarray, dV: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(gradient wrt W_hat, gradient wrt Z)."""
    return dV @ Z.T, lp.W_hat.T @ dV
