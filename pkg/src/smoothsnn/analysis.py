"""Diagnostics: membrane-potential distribution statistics, cross-timestep
histogram similarity, prefix-ensemble accuracy, closed-form temporal-gradient
sensitivity, and logit export.

All operations are read-only over traces and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric
from .data import SpikeDataset
from .errors import DataError, ParameterError
from .network import ForwardTrace, ModelParams, ModelSpec
from .training import forward_logits

RANGE_POOLED = "pooled"
RANGE_FIXED = "fixed"


@dataclass
class DistributionStats:
    """Per-timestep mean/std and fixed-bin histograms of pre-fire membrane
    potentials in one layer, over all batch elements and neurons."""

    layer: int
    means: np.ndarray       # (T,)
    stds: np.ndarray        # (T,)
    histograms: np.ndarray  # (T, bins) counts
    bin_edges: np.ndarray   # (bins + 1,)


def mp_stats(trace: ForwardTrace, layer: int, bins: int = 64,
             range_mode: str = RANGE_POOLED) -> DistributionStats:
    """Statistics of the pre-fire membrane potential at each timestep.

    The histogram range is shared across timesteps: either the pooled
    min/max of the whole trace, or a fixed +-2*threshold window.  Values are
    clipped into the range so every histogram keeps full mass.
    """
    if not trace.states or not trace.states[0]:
        raise DataError("empty trace")
    if not 0 <= layer < len(trace.states):
        raise ParameterError(f"layer {layer} outside [0, {len(trace.states)})")
    if range_mode not in (RANGE_POOLED, RANGE_FIXED):
        raise ParameterError(f"unknown range_mode {range_mode!r}")
    values = [st.h_pre().astype(np.float64).ravel() for st in trace.states[layer]]
    if range_mode == RANGE_FIXED:
        threshold = trace.spec.neuron.threshold
        lo, hi = -2.0 * threshold, 2.0 * threshold
    else:
        lo = min(v.min() for v in values)
        hi = max(v.max() for v in values)
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    means = np.array([v.mean() for v in values])
    stds = np.array([v.std() for v in values])
    hists = np.stack([np.histogram(np.clip(v, lo, hi), bins=edges)[0] for v in values])
    return DistributionStats(layer=layer, means=means, stds=stds,
                             histograms=hists, bin_edges=edges)


def adjacent_cosine(stats: DistributionStats) -> list[float]:
    """Cosine similarity between consecutive timesteps' histogram vectors.

    A zero histogram has similarity 0 by convention.  The t=0 comparison
    against the initialization is not represented here; the first entry
    compares the first two simulated timesteps.
    """
    hists = stats.histograms.astype(np.float64)
    if hists.shape[0] < 2:
        raise ParameterError("need at least two timesteps for adjacent similarity")
    out = []
    for t in range(1, hists.shape[0]):
        a, b = hists[t - 1], hists[t]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        out.append(float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0)
    return out


def prefix_ensemble_eval(spec: ModelSpec, params: ModelParams, dataset: SpikeDataset,
                         T: int | None = None, batch_size: int = 256,
                         rng: numeric.RngState | None = None,
                         threads: int = 1) -> list[float]:
    """Accuracy when inference averages only the first k timesteps, k = 1..T.

    Argmax ties resolve to the lowest class index.
    """
    logits = forward_logits(spec, params, dataset, batch_size, rng=rng, threads=threads)
    if T is None:
        T = logits.shape[0]
    if not 1 <= T <= logits.shape[0]:
        raise ParameterError(f"T={T} outside 1..{logits.shape[0]}")
    accs = []
    running = np.zeros(logits.shape[1:], dtype=np.float64)
    for k in range(1, T + 1):
        running += logits[k - 1]
        pred = (running / k).argmax(axis=1)
        accs.append(float((pred == dataset.labels).mean()))
    return accs


@dataclass(frozen=True)
class SensitivityQuery:
    """Closed-form temporal-gradient sensitivity over a timestep interval.

    ``epsilon`` is the effective diagonal of the one-step membrane
    sensitivity; by default the no-fire branch 1 - 1/tau.
    """

    tau: float
    alpha: float
    delta_t: int
    epsilon: float | None = None

    def __post_init__(self):
        if self.delta_t < 1:
            raise ParameterError(f"delta_t must be >= 1, got {self.delta_t}")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0,1), got {self.alpha}")
        if self.tau <= 1.0:
            raise ParameterError(f"tau must exceed 1, got {self.tau}")
        eps = self.effective_epsilon
        if not 0.0 <= eps < 1.0:
            raise ParameterError(f"epsilon out of [0,1): {eps}")

    @property
    def effective_epsilon(self) -> float:
        return (1.0 - 1.0 / self.tau) if self.epsilon is None else self.epsilon


def temporal_sensitivity(q: SensitivityQuery) -> tuple[float, float]:
    """(vanilla, smoothed) gradient sensitivity across ``delta_t`` steps.

    Without smoothing the sensitivity is the plain product eps**dt; with
    smoothing the blend adds a bypass term each step:
    (1-alpha)*eps*(alpha + (1-alpha)*eps)**(dt-1).
    """
    eps = q.effective_epsilon
    vanilla = eps ** q.delta_t
    smoothed = (1.0 - q.alpha) * eps * (q.alpha + (1.0 - q.alpha) * eps) ** (q.delta_t - 1)
    return vanilla, smoothed


def export_logits(spec: ModelSpec, params: ModelParams, dataset: SpikeDataset,
                  batch_size: int = 256, rng: numeric.RngState | None = None,
                  threads: int = 1) -> str:
    """CSV of every per-timestep logit, ordered by (sample, timestep, class)."""
    logits = forward_logits(spec, params, dataset, batch_size, rng=rng, threads=threads)
    lines = ["sample,timestep,class,logit"]
    T, n, c = logits.shape
    for s in range(n):
        for t in range(T):
            for j in range(c):
                lines.append(f"{s},{t},{j},{logits[t, s, j]:.9g}")
    return "\n".join(lines) + "\n"
