"""Training losses: ensemble cross-entropy, adjacent-timestep guidance, the
stochastic drop-combine rule, and ensemble-decomposition metrics.

All scalar losses are batch means, so the guidance coefficient and drop
probability keep their meaning across batch sizes.  The ``*_with_grads``
variants return the logit gradients the training loop feeds into BPTT;
by default the later timestep acts as a detached teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric
from .errors import DataError, DimensionError, ParameterError

GUIDANCE_KL = "kl"
GUIDANCE_MSE = "mse"


@dataclass(frozen=True)
class GuidanceConfig:
    """Adjacent-output guidance settings."""

    temperature: float = 2.0
    drop_probability: float = 0.5
    gamma: float = 1.0
    mode: str = GUIDANCE_KL
    detach_teacher: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ParameterError(f"drop_probability out of [0,1]: {self.drop_probability}")
        if self.gamma < 0:
            raise ParameterError(f"gamma must be nonnegative, got {self.gamma}")
        if self.mode not in (GUIDANCE_KL, GUIDANCE_MSE):
            raise ParameterError(f"unknown guidance mode {self.mode!r}")


def _log_softmax(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_guidance(o_t: np.ndarray, o_next: np.ndarray, temperature: float) -> float:
    """Temperature-softened KL from the later output's distribution to the
    earlier one's, scaled by temperature**2 and averaged over the batch."""
    loss, _, _ = kl_guidance_with_grads(o_t, o_next, temperature, detach_teacher=True)
    return loss


def kl_guidance_with_grads(o_t: np.ndarray, o_next: np.ndarray, temperature: float,
                           detach_teacher: bool = True):
    """Returns (loss, d loss/d o_t, d loss/d o_next or None)."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    o_t = np.atleast_2d(o_t)
    o_next = np.atleast_2d(o_next)
    if o_t.shape != o_next.shape:
        raise DimensionError(f"guidance operands differ in shape: {o_t.shape} vs {o_next.shape}")
    batch = o_t.shape[0]
    lp = _log_softmax(o_t, temperature)
    lq = _log_softmax(o_next, temperature)
    q = np.exp(lq)
    ratio = lq - lp
    per_row = (q * ratio).sum(axis=1)
    loss = float(temperature ** 2 * per_row.mean())
    p = np.exp(lp)
    g_student = (temperature * (p - q) / batch).astype(numeric.float_dtype())
    g_teacher = None
    if not detach_teacher:
        g_teacher = (temperature * q * (ratio - per_row[:, None]) / batch)
        g_teacher = g_teacher.astype(numeric.float_dtype())
    return loss, g_student, g_teacher


def mse_guidance(o_t: np.ndarray, o_next: np.ndarray) -> float:
    """Mean squared difference between adjacent outputs (regression guidance)."""
    loss, _, _ = mse_guidance_with_grads(o_t, o_next, detach_teacher=True)
    return loss


def mse_guidance_with_grads(o_t: np.ndarray, o_next: np.ndarray, detach_teacher: bool = True):
    o_t = np.atleast_2d(o_t)
    o_next = np.atleast_2d(o_next)
    if o_t.shape != o_next.shape:
        raise DimensionError(f"guidance operands differ in shape: {o_t.shape} vs {o_next.shape}")
    diff = o_t.astype(np.float64) - o_next.astype(np.float64)
    loss = float((diff ** 2).mean())
    g = (2.0 * diff / diff.size).astype(numeric.float_dtype())
    g_teacher = (-g) if not detach_teacher else None
    return loss, g, g_teacher


def drop_combine(losses, drop_probability: float, rng: numeric.RngState):
    """Keep the largest guidance loss, drop each other one with the given
    probability, then average the survivors.

    Returns (weights, combined).  Ties at the maximum go to the lowest index.
    The weights are floats that sum to exactly 1.0.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ParameterError("drop_combine needs a non-empty 1-D list of losses")
    if not 0.0 <= drop_probability <= 1.0:
        raise ParameterError(f"drop probability out of [0,1]: {drop_probability}")
    n = losses.size
    max_idx = int(np.argmax(losses))
    kept = np.zeros(n, dtype=bool)
    kept[max_idx] = True
    for i in range(n):
        if i == max_idx:
            continue
        if float(rng.uniform64(1)[0]) >= drop_probability:
            kept[i] = True
    k = int(kept.sum())
    weights = np.zeros(n, dtype=np.float64)
    weights[kept] = 1.0 / k
    # Nudge one surviving weight so the floating-point sum is exactly 1.
    last_kept = int(np.nonzero(kept)[0][-1])
    for _ in range(5):
        excess = float(weights.sum()) - 1.0
        if excess == 0.0:
            break
        weights[last_kept] -= excess
    combined = float(np.dot(weights, losses))
    return weights, combined


def ce_ensemble(trace_logits: np.ndarray, labels) -> float:
    """Cross-entropy of the timestep-averaged logits against integer labels."""
    loss, _ = ce_ensemble_with_grads(trace_logits, labels)
    return loss


def ce_ensemble_with_grads(trace_logits: np.ndarray, labels):
    """Returns (loss, d loss/d O_t of shape (T, batch, classes))."""
    logits = np.asarray(trace_logits)
    if logits.ndim != 3:
        raise DimensionError(f"expected (T, batch, classes) logits, got shape {logits.shape}")
    T, batch, n_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes})")
    avg = logits.mean(axis=0)
    lp = _log_softmax(avg)
    loss = float(-lp[np.arange(batch), labels].mean())
    p = np.exp(lp)
    p[np.arange(batch), labels] -= 1.0
    g_avg = p / batch
    grad = np.broadcast_to(g_avg / T, logits.shape).astype(numeric.float_dtype()).copy()
    return loss, grad


def total_loss(l_guidance: float, l_ce: float, gamma: float) -> float:
    """gamma-weighted guidance plus cross-entropy."""
    if gamma < 0:
        raise ParameterError(f"gamma must be nonnegative, got {gamma}")
    return gamma * l_guidance + l_ce


@dataclass
class EnsembleMetrics:
    """Decomposition of an ensemble's training signal into member fit,
    member diversity, and aggregate fit."""

    L_s: float
    L_d: float
    L_a: float
    L_ensemble: float
    alpha_div: float
    gamma_weights: np.ndarray
    N: int


def ensemble_metrics(member_logits: np.ndarray, labels, alpha_div: float = 1.0,
                     gamma_weights=None) -> EnsembleMetrics:
    """Member CE, pairwise-dot diversity, and aggregated CE for N members.

    Diversity sums the probability dot products over ordered pairs i != j and
    divides by N; a single member therefore scores 1 (empty pair sum).
    """
    logits = np.asarray(member_logits, dtype=np.float64)
    if logits.ndim != 3:
        raise DimensionError(f"expected (members, batch, classes) logits, got {logits.shape}")
    n_members, batch, n_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if gamma_weights is None:
        gamma_weights = np.full(n_members, 1.0 / n_members)
    gamma_weights = np.asarray(gamma_weights, dtype=np.float64)
    if gamma_weights.shape != (n_members,):
        raise ParameterError(f"need one member weight per member, got {gamma_weights.shape}")
    if abs(float(gamma_weights.sum()) - 1.0) > 1e-6:
        raise ParameterError(f"member weights must sum to 1, got {gamma_weights.sum()!r}")

    lp = _log_softmax(logits)                     # (N, B, C)
    member_ce = -lp[:, np.arange(batch), labels]  # (N, B)
    l_s = float(member_ce.mean())

    q = np.exp(lp)
    total = q.sum(axis=0)                          # (B, C)
    pair_sum = (total ** 2).sum(axis=1) - (q ** 2).sum(axis=(0, 2))
    l_d = float((1.0 - pair_sum / n_members).mean())

    aggregate = np.tensordot(gamma_weights, logits, axes=(0, 0))  # (B, C)
    lp_a = _log_softmax(aggregate)
    l_a = float(-lp_a[np.arange(batch), labels].mean())

    l_ens = l_s + l_a - alpha_div * l_d
    return EnsembleMetrics(L_s=l_s, L_d=l_d, L_a=l_a, L_ensemble=l_ens,
                           alpha_div=alpha_div, gamma_weights=gamma_weights, N=n_members)
