"""Dense spiking layers: temporal unrolling and backpropagation through time.

A model is a stack of fully connected spiking layers followed by a readout.
The default readout is a non-spiking leaky integrator whose membrane
potential at each timestep is the logit vector O_t; the alternative exposes
the final layer's spikes directly.

The backward pass sweeps layers top-down and time in reverse.  The spatial
path routes gradients through the rectangular surrogate at each firing site;
the temporal path follows the reset-leak recurrence and, when smoothing is
on, the blend recurrence Hs(t) <- alpha * Hs(t-1).  The per-layer blend
coefficient receives either the truncated single-step derivative (default)
or the exact recursive chain (``full_alpha_chain``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numeric
from .errors import ConsistencyError, DataError, DimensionError, FormatError, ParameterError
from .fileio import atomic_write_bytes
from .neuron import (
    LayerState,
    NeuronConfig,
    alpha_from_beta,
    dalpha_dbeta,
    dspike_dalpha_local,
    init_membrane,
    lif_step,
    smoothed_lif_step,
    surrogate_grad,
)

NORM_EPS = 1e-5

READOUT_MEMBRANE = "membrane"
READOUT_SPIKING = "spiking"


@dataclass(frozen=True)
class ModelSpec:
    """Layer topology plus neuron constants and feature flags."""

    layer_sizes: tuple[int, ...]
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    smoothing_enabled: bool = False
    readout: str = READOUT_MEMBRANE
    normalize: bool = False
    full_alpha_chain: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ParameterError(f"need at least input and output sizes, got {self.layer_sizes}")
        if any(n < 1 for n in self.layer_sizes):
            raise ParameterError(f"layer sizes must all be >= 1, got {self.layer_sizes}")
        if self.readout not in (READOUT_MEMBRANE, READOUT_SPIKING):
            raise ParameterError(f"unknown readout {self.readout!r}")

    @property
    def n_weight_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_spiking_layers(self) -> int:
        """Spiking layers: every hidden layer, plus the output layer when it spikes."""
        return self.n_weight_layers if self.readout == READOUT_SPIKING else self.n_weight_layers - 1

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class ModelParams:
    """Weights per connection layer plus per-layer blend and norm parameters."""

    weights: list[np.ndarray]
    betas: list[float] = field(default_factory=list)
    norm_scale: list[np.ndarray] = field(default_factory=list)
    norm_shift: list[np.ndarray] = field(default_factory=list)

    def named_entries(self):
        """Stable (name, array) pairs covering every parameter, betas as 1-element arrays."""
        for i, w in enumerate(self.weights):
            yield f"W{i + 1}", w
        for i, b in enumerate(self.betas):
            yield f"beta{i + 1}", np.asarray([b], dtype=numeric.float_dtype())
        for i, g in enumerate(self.norm_scale):
            yield f"norm_scale{i + 1}", g
        for i, s in enumerate(self.norm_shift):
            yield f"norm_shift{i + 1}", s


@dataclass
class NormCache:
    """Batch statistics recorded when per-timestep standardization is active."""

    x_hat: np.ndarray
    std: np.ndarray


@dataclass
class ForwardTrace:
    """Everything the backward pass and the analysis operations need."""

    spec: ModelSpec
    inputs: np.ndarray                       # (T, batch, n_in)
    states: list[list[LayerState]]           # [spiking layer][t]
    logits: np.ndarray                       # (T, batch, n_classes)
    init_H: list[np.ndarray]
    init_H_smooth: list[np.ndarray]
    norm_caches: list[list[NormCache]] | None = None
    relaxed: bool = False

    @property
    def n_timesteps(self) -> int:
        return self.inputs.shape[0]

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[1]

    def prev_smooth(self, layer: int, t: int) -> np.ndarray:
        return self.init_H_smooth[layer] if t == 0 else self.states[layer][t - 1].H_smooth


@dataclass
class Gradients:
    dW: list[np.ndarray]
    dbeta: list[float] = field(default_factory=list)
    dnorm_scale: list[np.ndarray] = field(default_factory=list)
    dnorm_shift: list[np.ndarray] = field(default_factory=list)


def init_params(spec: ModelSpec, rng: numeric.RngState, beta_init: float = 0.0) -> ModelParams:
    """Uniform +-sqrt(1/fan_in) weights; blend parameters start at ``beta_init``."""
    weights = []
    for l in range(spec.n_weight_layers):
        fan_in, fan_out = spec.layer_sizes[l], spec.layer_sizes[l + 1]
        bound = (1.0 / fan_in) ** 0.5
        weights.append(rng.uniform((fan_out, fan_in), -bound, bound))
    betas = [float(beta_init)] * spec.n_spiking_layers if spec.smoothing_enabled else []
    scale, shift = [], []
    if spec.normalize:
        for j in range(spec.n_spiking_layers):
            n = spec.layer_sizes[j + 1]
            scale.append(np.ones(n, dtype=numeric.float_dtype()))
            shift.append(np.zeros(n, dtype=numeric.float_dtype()))
    return ModelParams(weights=weights, betas=betas, norm_scale=scale, norm_shift=shift)


def _check_params(spec: ModelSpec, params: ModelParams) -> None:
    if len(params.weights) != spec.n_weight_layers:
        raise ConsistencyError(
            f"expected {spec.n_weight_layers} weight matrices, got {len(params.weights)}")
    for l, w in enumerate(params.weights):
        want = (spec.layer_sizes[l + 1], spec.layer_sizes[l])
        if w.shape != want:
            raise ConsistencyError(f"weight {l} has shape {w.shape}, expected {want}")
    if spec.smoothing_enabled and len(params.betas) != spec.n_spiking_layers:
        raise ConsistencyError(
            f"expected {spec.n_spiking_layers} blend parameters, got {len(params.betas)}")


def forward_unroll(spec: ModelSpec, params: ModelParams, input_spikes: np.ndarray,
                   rng: numeric.RngState | None = None, relaxed: bool = False) -> ForwardTrace:
    """Run the network over all timesteps, recording the full state trace.

    ``input_spikes`` is (T, batch, n_in).  ``rng`` is consumed only by the
    random membrane-initialization baseline.  ``relaxed`` swaps the firing
    step for its clipped-linear relaxation (gradient-checking mode).
    """
    x = np.asarray(input_spikes, dtype=numeric.float_dtype())
    if x.ndim != 3 or x.shape[2] != spec.layer_sizes[0]:
        raise DimensionError(
            f"input shape {x.shape} does not match (T, batch, {spec.layer_sizes[0]})")
    if not np.all(np.isfinite(x)):
        raise DataError("input spikes contain non-finite values")
    _check_params(spec, params)

    T, batch = x.shape[0], x.shape[1]
    cfg = spec.neuron
    n_spk = spec.n_spiking_layers
    alphas = [alpha_from_beta(b) for b in params.betas] if spec.smoothing_enabled else []

    init_H = [init_membrane(cfg, (batch, spec.layer_sizes[j + 1]), rng) for j in range(n_spk)]
    init_Hs = [h.copy() for h in init_H]
    prev_H = [h.copy() for h in init_H]
    prev_Hs = [h.copy() for h in init_Hs]

    states: list[list[LayerState]] = [[] for _ in range(n_spk)]
    caches: list[list[NormCache]] | None = [[] for _ in range(n_spk)] if spec.normalize else None
    logits = numeric.zeros((T, batch, spec.n_classes))
    readout_H = numeric.zeros((batch, spec.n_classes)) if spec.readout == READOUT_MEMBRANE else None

    for t in range(T):
        below = x[t]
        for j in range(n_spk):
            current = numeric.matmul(below, params.weights[j].T)
            if spec.normalize:
                mean = current.mean(axis=0)
                std = current.std(axis=0)
                x_hat = (current - mean) / (std + NORM_EPS)
                caches[j].append(NormCache(x_hat=x_hat, std=std))
                current = params.norm_scale[j] * x_hat + params.norm_shift[j]
            if spec.smoothing_enabled:
                st = smoothed_lif_step(prev_H[j], prev_Hs[j], current, cfg, alphas[j], relaxed)
            else:
                st = lif_step(prev_H[j], current, cfg, relaxed)
            states[j].append(st)
            prev_H[j], prev_Hs[j] = st.H, st.H_smooth
            below = st.S
        if spec.readout == READOUT_MEMBRANE:
            readout_H = cfg.decay * readout_H + numeric.matmul(below, params.weights[-1].T)
            logits[t] = readout_H
        else:
            logits[t] = below

    return ForwardTrace(spec=spec, inputs=x, states=states, logits=logits,
                        init_H=init_H, init_H_smooth=init_Hs,
                        norm_caches=caches, relaxed=relaxed)


def _norm_backward(g_out: np.ndarray, cache: NormCache, scale: np.ndarray):
    """Backward through out = scale * x_hat + shift with batch statistics."""
    batch = g_out.shape[0]
    d_shift = g_out.sum(axis=0)
    d_scale = (g_out * cache.x_hat).sum(axis=0)
    g_hat = g_out * scale
    denom = cache.std + NORM_EPS
    g1 = g_hat.sum(axis=0)
    g2 = (g_hat * cache.x_hat).sum(axis=0)
    corr = np.where(cache.std > 0, g2 / (batch * np.where(cache.std > 0, cache.std, 1.0)), 0.0)
    g_raw = (g_hat - g1 / batch) / denom - cache.x_hat * corr
    return g_raw.astype(g_out.dtype), d_scale, d_shift


def backward_bptt(spec: ModelSpec, params: ModelParams, trace: ForwardTrace,
                  grad_logits: np.ndarray) -> Gradients:
    """Reverse sweep over timesteps and layers, producing dW and dbeta.

    ``grad_logits`` is d(loss)/d(O_t), shape (T, batch, n_classes).  The
    trace must come from a matching ``forward_unroll`` call.
    """
    if trace.spec != spec:
        raise ConsistencyError("trace was produced by a different model spec")
    _check_params(spec, params)
    g_log = np.asarray(grad_logits, dtype=trace.logits.dtype)
    if g_log.shape != trace.logits.shape:
        raise ConsistencyError(
            f"grad_logits shape {g_log.shape} does not match logits {trace.logits.shape}")

    T, batch = trace.n_timesteps, trace.batch_size
    cfg = spec.neuron
    n_spk = spec.n_spiking_layers
    alphas = [alpha_from_beta(b) for b in params.betas] if spec.smoothing_enabled else []

    grads = Gradients(dW=[np.zeros_like(w) for w in params.weights],
                      dbeta=[0.0] * len(params.betas),
                      dnorm_scale=[np.zeros_like(g) for g in params.norm_scale],
                      dnorm_shift=[np.zeros_like(s) for s in params.norm_shift])

    # Gradient arriving at each spiking layer's spike output, per timestep.
    if spec.readout == READOUT_MEMBRANE:
        g_spike = [numeric.zeros((batch, spec.layer_sizes[n_spk])) for _ in range(T)]
        g_readout = numeric.zeros((batch, spec.n_classes))
        w_out = params.weights[-1]
        for t in range(T - 1, -1, -1):
            g_readout = g_log[t] + cfg.decay * g_readout
            top_spikes = trace.states[n_spk - 1][t].S if n_spk > 0 else trace.inputs[t]
            grads.dW[-1] += numeric.matmul(g_readout.T, top_spikes)
            g_spike[t] = numeric.matmul(g_readout, w_out)
    else:
        g_spike = [g_log[t] for t in range(T)]

    for j in range(n_spk - 1, -1, -1):
        alpha = alphas[j] if spec.smoothing_enabled else None
        g_H = numeric.zeros((batch, spec.layer_sizes[j + 1]))      # into H(t) from t+1
        g_Hs_next = numeric.zeros((batch, spec.layer_sizes[j + 1]))  # into Hs(t) from t+1
        d_alpha_full = 0.0
        d_alpha_trunc = 0.0
        g_below = [None] * T
        for t in range(T - 1, -1, -1):
            st = trace.states[j][t]
            p = st.h_pre()
            g = surrogate_grad(p, cfg)
            g_spike_total = g_spike[t] - cfg.threshold * g_H
            g_p = g_spike_total * g + g_H
            if spec.smoothing_enabled:
                g_Hs = g_p + alpha * g_Hs_next
                diff = trace.prev_smooth(j, t) - st.U
                d_alpha_full += float(np.sum(g_Hs * diff))
                d_alpha_trunc += float(
                    np.sum(g_spike_total * dspike_dalpha_local(p, trace.prev_smooth(j, t), st.U, cfg)))
                g_H = cfg.decay * ((1.0 - alpha) * g_Hs)
                g_Hs_next = g_Hs
            else:
                g_H = cfg.decay * g_p
            g_current = g_p
            if spec.normalize:
                g_current, d_scale, d_shift = _norm_backward(
                    g_current, trace.norm_caches[j][t], params.norm_scale[j])
                grads.dnorm_scale[j] += d_scale
                grads.dnorm_shift[j] += d_shift
            below = trace.states[j - 1][t].S if j > 0 else trace.inputs[t]
            grads.dW[j] += numeric.matmul(g_current.T, below)
            g_below[t] = numeric.matmul(g_current, params.weights[j])
        if spec.smoothing_enabled:
            d_alpha = d_alpha_full if spec.full_alpha_chain else d_alpha_trunc
            grads.dbeta[j] = d_alpha * dalpha_dbeta(params.betas[j])
        g_spike = g_below

    return grads


@dataclass
class SpikeCounts:
    """Exact spike tallies: rows are spiking layers, columns timesteps."""

    per_layer: np.ndarray  # (n_spiking_layers, T) int64

    @property
    def per_timestep(self) -> np.ndarray:
        return self.per_layer.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.per_layer.sum())


def count_spikes(trace: ForwardTrace) -> SpikeCounts:
    """Count S == 1 events per layer and timestep; the total is the energy proxy."""
    T = trace.n_timesteps
    out = np.zeros((len(trace.states), T), dtype=np.int64)
    for j, layer_states in enumerate(trace.states):
        for t, st in enumerate(layer_states):
            out[j, t] = int(np.count_nonzero(st.S == 1.0))
    return SpikeCounts(per_layer=out)


# ---------------------------------------------------------------------------
# Checkpoint container: length-prefixed JSON manifest followed by one flat
# little-endian float32 blob per parameter, in manifest order.
# ---------------------------------------------------------------------------

_CHECKPOINT_FORMAT = "smoothsnn-checkpoint-v1"


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "layer_sizes": list(spec.layer_sizes),
        "tau": spec.neuron.tau,
        "threshold": spec.neuron.threshold,
        "surrogate_width": spec.neuron.surrogate_width,
        "mp_init": list(spec.neuron.mp_init) if spec.neuron.mp_init is not None else None,
        "smoothing_enabled": spec.smoothing_enabled,
        "readout": spec.readout,
        "normalize": spec.normalize,
        "full_alpha_chain": spec.full_alpha_chain,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    mp = d.get("mp_init")
    cfg = NeuronConfig(tau=d["tau"], threshold=d["threshold"],
                       surrogate_width=d["surrogate_width"],
                       mp_init=tuple(mp) if mp is not None else None)
    return ModelSpec(layer_sizes=tuple(d["layer_sizes"]), neuron=cfg,
                     smoothing_enabled=d["smoothing_enabled"], readout=d["readout"],
                     normalize=d["normalize"], full_alpha_chain=d["full_alpha_chain"])


def save_checkpoint(path, spec: ModelSpec, params: ModelParams) -> None:
    entries = []
    blobs = []
    for name, arr in params.named_entries():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr32.tobytes())
    manifest = json.dumps({
        "format": _CHECKPOINT_FORMAT,
        "float_mode": numeric.float_mode(),
        "spec": spec_to_dict(spec),
        "params": entries,
    }, sort_keys=True).encode("utf-8")
    payload = struct.pack("<Q", len(manifest)) + manifest + b"".join(blobs)
    atomic_write_bytes(path, payload)


def _format_error(path, offset: int, message: str) -> FormatError:
    return FormatError(f"{path}: {message} (at byte {offset})")


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise _format_error(path, 0, "missing manifest length header")
    (mlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + mlen:
        raise _format_error(path, len(raw), "truncated manifest")
    manifest = json.loads(raw[8:8 + mlen].decode("utf-8"))
    if manifest.get("format") != _CHECKPOINT_FORMAT:
        raise _format_error(path, 8, f"unexpected format tag {manifest.get('format')!r}")
    spec = spec_from_dict(manifest["spec"])
    offset = 8 + mlen
    arrays = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = 4 * count
        if len(raw) < offset + nbytes:
            raise _format_error(path, len(raw), f"truncated blob for {entry['name']}")
        flat = np.frombuffer(raw[offset:offset + nbytes], dtype="<f4")
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(numeric.float_dtype())
        offset += nbytes
    weights = [arrays[f"W{i + 1}"] for i in range(spec.n_weight_layers)]
    betas = []
    i = 1
    while f"beta{i}" in arrays:
        betas.append(float(arrays[f"beta{i}"][0]))
        i += 1
    scale, shift = [], []
    i = 1
    while f"norm_scale{i}" in arrays:
        scale.append(arrays[f"norm_scale{i}"])
        shift.append(arrays[f"norm_shift{i}"])
        i += 1
    return spec, ModelParams(weights=weights, betas=betas, norm_scale=scale, norm_shift=shift)
