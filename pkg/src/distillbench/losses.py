"""Loss functions with analytic gradients.

Every loss returns a :class:`LossValue` whose ``grads`` map an input role to
the gradient of the scalar wrt that input. Roles used by the trainer:

``logits``            student classifier output ``Z``
``projected``         (ensemble-)projected student features, or raw ``S``
``projected_logits``  logit-projector output ``V``

Teacher tensors never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import EPS, log_softmax_temp, softmax_temp


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError(f"non-finite loss value {self.value}")


def _check_labels(labels: np.ndarray, c: int, b: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def ce_loss(Z: np.ndarray, labels) -> LossValue:
    c, b = Z.shape
    y = _check_labels(labels, c, b)
    logp = log_softmax_temp(Z)
    cols = np.arange(b)
    value = -float(np.mean(logp[y, cols]))
    grad = np.exp(logp)
    grad[y, cols] -= 1.0
    grad /= b
    return LossValue(value, {"logits": grad}, {"ce": value})


def mean_cosine(G: np.ndarray, T: np.ndarray, eps: float = EPS) -> float:
    gn = np.maximum(np.sqrt(np.sum(G * G, axis=0)), eps)
    tn = np.maximum(np.sqrt(np.sum(T * T, axis=0)), eps)
    return float(np.mean(np.sum(G * T, axis=0) / (gn * tn)))


def da_loss(G: np.ndarray, T: np.ndarray, eps: float = EPS, role: str = "projected") -> LossValue:
    """One minus the mean column-wise cosine between ``G`` and the frozen teacher ``T``."""
    if G.shape != T.shape:
        raise ValueError(f"student {G.shape} and teacher {T.shape} feature shapes differ")
    b = G.shape[1]
    g_raw = np.sqrt(np.sum(G * G, axis=0))
    gn = np.maximum(g_raw, eps)
    tn = np.maximum(np.sqrt(np.sum(T * T, axis=0)), eps)
    t_hat = T / tn
    cos = np.sum(G * t_hat, axis=0) / gn
    value = 1.0 - float(np.mean(cos))
    # d cos / dG: (t_hat - cos * G/|G|^2 * |G|) / |G| when |G| > eps, t_hat / eps otherwise
    active = g_raw > eps
    dcos = t_hat / gn
    dcos = dcos - np.where(active, cos / (gn * gn), 0.0) * G
    grad = -dcos / b
    return LossValue(value, {role: grad}, {"distill": value})


def mda_loss(F: np.ndarray, T: np.ndarray, eps: float = EPS) -> LossValue:
    """Direction alignment applied to the ensemble average ``F``."""
    return da_loss(F, T, eps)


def teacher_entropy(P: np.ndarray, mu: float) -> float:
    """Mean entropy of the temperature-softened teacher distribution."""
    p = softmax_temp(P, mu)
    return -float(np.mean(np.sum(p * log_softmax_temp(P, mu), axis=0)))


def kl_loss(P: np.ndarray, Z: np.ndarray, mu: float = 4.0, mu_sq_grad: bool = True,
            role: str = "logits") -> LossValue:
    """Soft-target cross-entropy ``-sum softmax(P/mu) log softmax(Z/mu)``, batch mean.

    The value is exactly that cross-entropy. With ``mu_sq_grad`` the returned
    gradient is additionally scaled by ``mu**2`` so its magnitude does not
    shrink with temperature.
    """
    if not mu > 0:
        raise ValueError(f"temperature must be positive, got {mu}")
    if P.shape != Z.shape:
        raise ValueError(f"teacher {P.shape} and student {Z.shape} logits differ in shape")
    b = Z.shape[1]
    p = softmax_temp(P, mu)
    logq = log_softmax_temp(Z, mu)
    value = -float(np.mean(np.sum(p * logq, axis=0)))
    grad = (np.exp(logq) - p) / (mu * b)
    if mu_sq_grad:
        grad *= mu * mu
    return LossValue(value, {role: grad}, {"distill": value})


def mkl_loss(P: np.ndarray, V: np.ndarray, mu: float = 4.0, mu_sq_grad: bool = True) -> LossValue:
    """:func:`kl_loss` against projected student logits ``V``."""
    return kl_loss(P, V, mu, mu_sq_grad, role="projected_logits")


def _merge(terms: list[tuple[float, LossValue]]) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    for w, lv in terms:
        for k, g in lv.grads.items():
            grads[k] = w * g if k not in grads else grads[k] + w * g
    return grads


def total_feature_loss(ce: LossValue, distill: LossValue, alpha: float) -> LossValue:
    """``ce + alpha * distill``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    value = ce.value + alpha * distill.value
    return LossValue(value, _merge([(1.0, ce), (alpha, distill)]),
                     {"ce": ce.value, "distill": distill.value})


def total_logit_loss(ce: LossValue, kl: LossValue, beta: float) -> LossValue:
    """``beta * ce + (1 - beta) * kl``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    value = beta * ce.value + (1.0 - beta) * kl.value
    return LossValue(value, _merge([(beta, ce), (1.0 - beta, kl)]),
                     {"ce": ce.value, "distill": kl.value})


# -- target / non-target decomposition -------------------------------------

@dataclass
class DecompositionReport:
    tckd: float
    nckd: float
    nckd_weight: float
    reconstruction: float
    kl: float
    degenerate: bool = False


def _kl(a: np.ndarray, b: np.ndarray) -> float:
    mask = a > 0
    return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))


def decompose_probs(p_hat: np.ndarray, z_hat: np.ndarray, target: int) -> DecompositionReport:
    """Split KL(p_hat || z_hat) into target-vs-rest and within-non-target parts."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    c = p_hat.size
    if not 0 <= target < c:
        raise ValueError(f"target {target} outside [0, {c})")
    pt, zt = p_hat[target], z_hat[target]
    tckd = _kl(np.array([pt, 1.0 - pt]), np.array([zt, 1.0 - zt]))
    kl = _kl(p_hat, z_hat)
    rest = np.arange(c) != target
    weight = 1.0 - pt
    if weight <= 0.0:
        return DecompositionReport(tckd, 0.0, 0.0, tckd, kl, degenerate=True)
    nckd = _kl(p_hat[rest] / p_hat[rest].sum(), z_hat[rest] / z_hat[rest].sum())
    return DecompositionReport(tckd, nckd, weight, tckd + weight * nckd, kl)


def tckd_nckd(p: np.ndarray, z: np.ndarray, mu: float, target: int) -> DecompositionReport:
    """Decomposition for one sample from teacher logits ``p`` and student logits ``z``."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if p.shape != z.shape:
        raise ValueError("teacher and student logits differ in length")
    return decompose_probs(softmax_temp(p, mu), softmax_temp(z, mu), target)


def decompose_batch(P: np.ndarray, Z: np.ndarray, mu: float, labels) -> dict[str, float]:
    """Batch means of TCKD, NCKD and the full KL over columns of ``P`` and ``Z``."""
    labels = _check_labels(labels, P.shape[0], P.shape[1])
    reports = [tckd_nckd(P[:, i], Z[:, i], mu, int(labels[i])) for i in range(P.shape[1])]
    return {
        "tckd": float(np.mean([r.tckd for r in reports])),
        "nckd": float(np.mean([r.nckd for r in reports])),
        "weighted_nckd": float(np.mean([r.nckd_weight * r.nckd for r in reports])),
        "kl": float(np.mean([r.kl for r in reports])),
        "degenerate": int(sum(r.degenerate for r in reports)),
    }
