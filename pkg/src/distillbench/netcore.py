"""Fully-connected networks with a hand-written backward pass.

The last hidden layer's post-activation output is the feature matrix ``S``
used for distillation; the classifier maps it to logits ``Z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .numkit import SeededRng, init_matrix

ACTIVATIONS = ("relu", "gelu", "none")
CKPT_MAGIC = "DISTILLBENCH-CKPT v1"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def activate(x: np.ndarray, name: str) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "gelu":
        # exact form x * Phi(x)
        return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))
    if name == "none":
        return x
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(x: np.ndarray, name: str) -> np.ndarray:
    """Derivative of the activation evaluated at the pre-activation ``x``."""
    if name == "relu":
        return (x > 0).astype(np.float64)
    if name == "gelu":
        return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)
    if name == "none":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}:{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def token(self) -> str:
        return f"{self.in_dim}:{self.out_dim}:{self.activation}"


def mlp_specs(input_dim: int, hidden: tuple[int, ...] | list[int], n_classes: int,
              activation: str = "relu") -> list[LayerSpec]:
    dims = [input_dim, *hidden]
    specs = [LayerSpec(a, b, activation) for a, b in zip(dims[:-1], dims[1:])]
    specs.append(LayerSpec(dims[-1], n_classes, "none"))
    return specs


class Network:
    """MLP: hidden layers with activations followed by a linear classifier."""

    def __init__(self, specs: list[LayerSpec], weights: list[np.ndarray], biases: list[np.ndarray],
                 seed: int = 0, epoch: int = 0):
        if not specs:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(specs[:-1], specs[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(f"layer dims do not chain: {prev.token()} -> {nxt.token()}")
        if specs[-1].activation != "none":
            raise ValueError("classifier layer must have activation 'none'")
        for spec, w, b in zip(specs, weights, biases, strict=True):
            if w.shape != (spec.out_dim, spec.in_dim) or b.shape != (spec.out_dim,):
                raise ValueError(f"parameter shapes {w.shape}/{b.shape} do not match layer {spec.token()}")
        self.specs = list(specs)
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.seed = int(seed)
        self.epoch = int(epoch)
        self.version = 0

    @classmethod
    def init(cls, specs: list[LayerSpec], rng: SeededRng, strategy: str = "fan_in_uniform",
             seed: int = 0) -> "Network":
        weights, biases = [], []
        for spec in specs:
            weights.append(init_matrix(spec.out_dim, spec.in_dim, strategy, rng))
            bound = 1.0 / np.sqrt(spec.in_dim)
            biases.append(rng.uniform(-bound, bound, (spec.out_dim,)))
        return cls(specs, weights, biases, seed=seed)

    @property
    def input_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.specs[-1].in_dim

    @property
    def n_classes(self) -> int:
        return self.specs[-1].out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"layer.{i}.weight", w))
            out.append((f"layer.{i}.bias", b))
        return out

    def copy(self) -> "Network":
        net = Network(self.specs, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                      seed=self.seed, epoch=self.epoch)
        return net

    def touch(self) -> None:
        """Invalidate outstanding tapes after an in-place parameter update."""
        self.version += 1


@dataclass
class Tape:
    owner: object
    version: int
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    consumed: bool = False

    def check(self) -> None:
        if self.consumed or self.version != self.owner.version:
            raise RuntimeError("stale tape: parameters changed or tape already used")


def forward(net: Network, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, Tape]:
    """Return features ``S`` (feature_dim x b), logits ``Z`` (c x b) and the tape."""
    if X.ndim != 2 or X.shape[0] != net.input_dim:
        raise ValueError(f"input has shape {X.shape}, network expects {net.input_dim} rows")
    tape = Tape(net, net.version)
    a = X
    for spec, w, b in zip(net.specs[:-1], net.weights[:-1], net.biases[:-1]):
        pre = w @ a + b[:, None]
        tape.inputs.append(a)
        tape.pre.append(pre)
        a = activate(pre, spec.activation)
    tape.inputs.append(a)
    Z = net.weights[-1] @ a + net.biases[-1][:, None]
    return a, Z, tape


def backward(tape: Tape, dZ: np.ndarray | None, dS: np.ndarray | None) -> list[np.ndarray]:
    """Gradients for ``net.params()`` given output gradients at logits and features.

    The two heads meet at ``S``: classifier backprop and ``dS`` are summed there.
    Either may be ``None`` for zero.
    """
    tape.check()
    net: Network = tape.owner
    S = tape.inputs[-1]
    b = S.shape[1]
    c = net.n_classes
    if dZ is None:
        dZ = np.zeros((c, b))
    if dS is None:
        dS = np.zeros_like(S)
    if dZ.shape != (c, b) or dS.shape != S.shape:
        raise ValueError(f"gradient shapes {dZ.shape}/{dS.shape} do not match outputs {(c, b)}/{S.shape}")
    tape.consumed = True

    n = len(net.specs)
    grads: list[np.ndarray] = [None] * (2 * n)  # type: ignore[list-item]
    grads[2 * (n - 1)] = dZ @ S.T
    grads[2 * (n - 1) + 1] = dZ.sum(axis=1)
    dA = net.weights[-1].T @ dZ + dS
    for i in range(n - 2, -1, -1):
        dpre = dA * activation_grad(tape.pre[i], net.specs[i].activation)
        grads[2 * i] = dpre @ tape.inputs[i].T
        grads[2 * i + 1] = dpre.sum(axis=1)
        if i > 0:
            dA = net.weights[i].T @ dpre
    return grads


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float, momentum: float,
             weight_decay: float, velocity: list[np.ndarray]) -> list[np.ndarray]:
    """In-place SGD with momentum: ``v = m*v + g + wd*p``, ``p -= lr*v``."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if not len(params) == len(grads) == len(velocity):
        raise ValueError("params, grads and velocity must have equal length")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch in sgd_step: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


class SGD:
    """Momentum SGD over parameter groups, each with its own weight decay."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.groups: list[tuple[list[np.ndarray], float, list[np.ndarray], object]] = []

    def add_group(self, params: list[np.ndarray], weight_decay: float, owner=None) -> None:
        self.groups.append((params, weight_decay, [np.zeros_like(p) for p in params], owner))

    def step(self, grads_per_group: list[list[np.ndarray]], lr: float) -> None:
        if len(grads_per_group) != len(self.groups):
            raise ValueError("one gradient list per parameter group expected")
        for (params, wd, vel, owner), grads in zip(self.groups, grads_per_group):
            sgd_step(params, grads, lr, self.momentum, wd, vel)
            if owner is not None:
                owner.touch()


# -- checkpoint files -------------------------------------------------------

class CheckpointError(ValueError):
    pass


def _fmt(a: np.ndarray) -> str:
    return " ".join(repr(v) for v in a.reshape(-1).tolist())


def write_param_file(path, spec_line: str, seed: int, epoch: int,
                     tensors: list[tuple[str, np.ndarray]]) -> None:
    lines = [CKPT_MAGIC, spec_line, f"seed={int(seed)} epoch={int(epoch)}"]
    for name, t in tensors:
        dims = "x".join(str(d) for d in t.shape)
        lines.append(f"{name} {dims} {_fmt(t)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_param_file(path) -> tuple[str, int, int, dict[str, np.ndarray]]:
    """Parse a parameter file into (spec line, seed, epoch, tensors by name)."""
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3:
        raise CheckpointError(f"{path}: line {len(lines) + 1}: truncated header")
    if lines[0].strip() != CKPT_MAGIC:
        raise CheckpointError(f"{path}: line 1: bad magic {lines[0]!r}")
    try:
        kv = dict(tok.split("=", 1) for tok in lines[2].split())
        seed, epoch = int(kv["seed"]), int(kv["epoch"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: line 3: expected 'seed=<int> epoch=<int>'") from exc
    tensors: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 2:
            raise CheckpointError(f"{path}: line {lineno}: missing tensor dims")
        name, dims_txt = parts[0], parts[1]
        try:
            dims = tuple(int(d) for d in dims_txt.split("x"))
            values = np.array([float(v) for v in parts[2:]], dtype=np.float64)
        except ValueError as exc:
            raise CheckpointError(f"{path}: line {lineno}: unparsable tensor {name!r}") from exc
        if values.size != int(np.prod(dims)):
            raise CheckpointError(
                f"{path}: line {lineno}: tensor {name!r} declares {dims_txt} but has {values.size} values")
        tensors[name] = values.reshape(dims)
    return lines[1], seed, epoch, tensors


def parse_spec_line(line: str, path="<ckpt>") -> list[LayerSpec]:
    try:
        specs = []
        for tok in line.strip().split(","):
            a, b, act = tok.split(":")
            specs.append(LayerSpec(int(a), int(b), act))
        return specs
    except ValueError as exc:
        raise CheckpointError(f"{path}: line 2: bad layer spec list {line!r}") from exc


def save_checkpoint(net: Network, path) -> None:
    spec_line = ",".join(s.token() for s in net.specs)
    write_param_file(path, spec_line, net.seed, net.epoch, net.named_params())


def load_checkpoint(path) -> Network:
    spec_line, seed, epoch, tensors = read_param_file(path)
    specs = parse_spec_line(spec_line, path)
    weights, biases = [], []
    for i, spec in enumerate(specs):
        for kind, shape, bucket in (("weight", (spec.out_dim, spec.in_dim), weights),
                                    ("bias", (spec.out_dim,), biases)):
            name = f"layer.{i}.{kind}"
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name!r} (file truncated?)")
            if tensors[name].shape != shape:
                raise CheckpointError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                                      f"header implies {shape}")
            bucket.append(tensors[name])
    return Network(specs, weights, biases, seed=seed, epoch=epoch)
