"""Single-timestep LIF dynamics, with and without membrane-potential smoothing.

Step ordering for the smoothed neuron (the vanilla neuron skips the blend):

    leak      U(t)  = (1 - 1/tau) * H(t-1)
    blend     Hs(t) = alpha * Hs(t-1) + (1 - alpha) * U(t)
    charge    P(t)  = Hs(t) + I(t)
    fire      S(t)  = 1 if P(t) >= threshold else 0
    reset     H(t)  = P(t) - S(t) * threshold        (soft reset)

``Hs`` is the smoothed potential; the blend coefficient alpha is the sigmoid
of a trainable per-layer scalar beta, so it always stays inside (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numeric
from .errors import DimensionError, ParameterError

ALPHA_CLAMP = 1e-6


@dataclass(frozen=True)
class NeuronConfig:
    """LIF constants.

    ``mp_init`` selects the membrane state at t=0: ``None`` starts at zero,
    a ``(low, high)`` pair draws uniformly from that half-open range.
    """

    tau: float = 2.0
    threshold: float = 1.0
    surrogate_width: float = 1.0
    mp_init: tuple[float, float] | None = None

    def __post_init__(self):
        if self.tau <= 1.0:
            raise ParameterError(f"tau must exceed 1 so the decay stays in (0,1), got {self.tau}")
        if self.threshold <= 0.0:
            raise ParameterError(f"threshold must be positive, got {self.threshold}")
        if self.surrogate_width <= 0.0:
            raise ParameterError(f"surrogate_width must be positive, got {self.surrogate_width}")
        if self.mp_init is not None:
            low, high = self.mp_init
            if not low < high:
                raise ParameterError(f"mp_init range must satisfy low < high, got {self.mp_init}")

    @property
    def decay(self) -> float:
        return 1.0 - 1.0 / self.tau


@dataclass
class LayerState:
    """Per-timestep state of one spiking layer (all arrays batch x neurons).

    ``H`` is the post-reset membrane potential, ``H_smooth`` the blended
    potential (for the vanilla neuron it carries the pre-fire potential so
    traces have one layout), ``U`` the leaked potential, ``I`` the input
    current and ``S`` the spike output.
    """

    H: np.ndarray
    H_smooth: np.ndarray
    U: np.ndarray
    I: np.ndarray
    S: np.ndarray
    smoothed: bool = field(default=False)

    def h_pre(self) -> np.ndarray:
        """Pre-fire membrane potential, recomputed exactly as the forward did."""
        return self.H_smooth + self.I if self.smoothed else self.H_smooth


def _require_same_shape(what: str, *arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise DimensionError(f"{what}: mismatched shapes {sorted(shapes)}")


def spike_fn(h_pre: np.ndarray, cfg: NeuronConfig, relaxed: bool = False) -> np.ndarray:
    """Heaviside firing rule, or its clipped-linear relaxation.

    The relaxation replaces the step with the ramp whose derivative is
    exactly the rectangular surrogate, so hand-coded backward passes can be
    validated against finite differences of the relaxed forward.
    """
    if relaxed:
        ramp = (h_pre - cfg.threshold) / cfg.surrogate_width + 0.5
        return np.clip(ramp, 0.0, 1.0).astype(h_pre.dtype)
    return (h_pre >= cfg.threshold).astype(h_pre.dtype)


def lif_step(prev_H: np.ndarray, input_I: np.ndarray, cfg: NeuronConfig,
             relaxed: bool = False) -> LayerState:
    """One vanilla LIF step: leak, charge, fire, soft reset."""
    _require_same_shape("lif_step", prev_H, input_I)
    U = cfg.decay * prev_H
    h_pre = U + input_I
    S = spike_fn(h_pre, cfg, relaxed)
    H = h_pre - S * cfg.threshold
    return LayerState(H=H, H_smooth=h_pre, U=U, I=input_I, S=S, smoothed=False)


def smoothed_lif_step(prev_H: np.ndarray, prev_H_smooth: np.ndarray, input_I: np.ndarray,
                      cfg: NeuronConfig, alpha: float, relaxed: bool = False) -> LayerState:
    """One smoothed LIF step: leak, blend with the previous smoothed state,
    charge, fire, soft reset."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0,1), got {alpha}")
    _require_same_shape("smoothed_lif_step", prev_H, prev_H_smooth, input_I)
    U = cfg.decay * prev_H
    H_smooth = alpha * prev_H_smooth + (1.0 - alpha) * U
    h_pre = H_smooth + input_I
    S = spike_fn(h_pre, cfg, relaxed)
    H = h_pre - S * cfg.threshold
    return LayerState(H=H, H_smooth=H_smooth, U=U, I=input_I, S=S, smoothed=True)


def surrogate_grad(h_pre: np.ndarray, cfg: NeuronConfig) -> np.ndarray:
    """Rectangular surrogate derivative: 1/a inside |h - threshold| < a/2, else 0.

    The window edge is excluded (strict inequality).
    """
    a = cfg.surrogate_width
    inside = np.abs(h_pre - cfg.threshold) < a / 2.0
    return inside.astype(h_pre.dtype) / h_pre.dtype.type(a)


def dspike_dalpha_local(h_pre: np.ndarray, prev_H_smooth: np.ndarray, U: np.ndarray,
                        cfg: NeuronConfig) -> np.ndarray:
    """Single-step derivative of the spike w.r.t. the blend coefficient.

    Truncated chain: the recursive dependence of the previous smoothed state
    on alpha is ignored; only the direct blend term contributes.
    """
    _require_same_shape("dspike_dalpha_local", h_pre, prev_H_smooth, U)
    return surrogate_grad(h_pre, cfg) * (prev_H_smooth - U)


def alpha_from_beta(beta: float) -> float:
    """sigmoid(beta), clamped away from {0, 1} so smoothing never freezes."""
    if beta >= 0:
        alpha = 1.0 / (1.0 + math.exp(-beta))
    else:
        e = math.exp(beta)
        alpha = e / (1.0 + e)
    return min(max(alpha, ALPHA_CLAMP), 1.0 - ALPHA_CLAMP)


def dalpha_dbeta(beta: float) -> float:
    alpha = alpha_from_beta(beta)
    return alpha * (1.0 - alpha)


def init_membrane(cfg: NeuronConfig, shape, rng: numeric.RngState | None) -> np.ndarray:
    """Membrane state at t=0 per ``cfg.mp_init``."""
    if cfg.mp_init is None:
        return numeric.zeros(shape)
    if rng is None:
        raise ParameterError("random membrane init requires an RngState")
    low, high = cfg.mp_init
    return rng.uniform(shape, low, high)
