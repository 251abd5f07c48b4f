"""End-to-end training loop: unroll, guidance collection, drop-combine,
BPTT, and momentum-SGD updates with a step-decayed learning rate.

A run is fully determined by its seed: weight init, the train/validation
split, epoch shuffling, and loss dropping each consume an independent child
stream, so enabling or disabling one feature never perturbs the others.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numeric
from .data import SpikeDataset
from .errors import ConsistencyError, DataError, ParameterError
from .network import (
    ForwardTrace,
    Gradients,
    ModelParams,
    ModelSpec,
    backward_bptt,
    count_spikes,
    forward_unroll,
    init_params,
)
from .neuron import alpha_from_beta
from .objective import (
    GUIDANCE_KL,
    GuidanceConfig,
    ce_ensemble_with_grads,
    drop_combine,
    kl_guidance_with_grads,
    mse_guidance_with_grads,
    total_loss,
)


@dataclass(frozen=True)
class TrainConfig:
    T: int = 5
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 0.1
    lr_decay_every: int = 30
    weight_decay: float = 1e-3
    momentum: float = 0.9
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    float_mode: str = "float32"
    beta_init: float = 0.0
    val_fraction: float = 0.1
    eval_threads: int = 1

    def __post_init__(self):
        if self.T < 1:
            raise ParameterError(f"T must be >= 1, got {self.T}")
        if self.lr0 <= 0:
            raise ParameterError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ParameterError(f"val_fraction out of [0,1): {self.val_fraction}")


@dataclass
class OptimizerState:
    vel_w: list[np.ndarray]
    vel_beta: list[float]
    vel_scale: list[np.ndarray]
    vel_shift: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(vel_w=[np.zeros_like(w) for w in params.weights],
                   vel_beta=[0.0] * len(params.betas),
                   vel_scale=[np.zeros_like(g) for g in params.norm_scale],
                   vel_shift=[np.zeros_like(s) for s in params.norm_shift])


def sgd_step(params: ModelParams, grads: Gradients, opt: OptimizerState,
             lr: float, momentum: float, weight_decay: float):
    """Momentum SGD in place.  Weight decay touches the weights only; blend
    and normalization parameters decay toward meaningless values."""
    if len(grads.dW) != len(params.weights):
        raise ConsistencyError("gradient/parameter layer counts differ")
    for w, g, v in zip(params.weights, grads.dW, opt.vel_w):
        if w.shape != g.shape:
            raise ConsistencyError(f"gradient shape {g.shape} != weight shape {w.shape}")
        g_eff = g + weight_decay * w
        v *= momentum
        v += g_eff
        w -= lr * v
    for i, g in enumerate(grads.dbeta):
        opt.vel_beta[i] = momentum * opt.vel_beta[i] + g
        params.betas[i] -= lr * opt.vel_beta[i]
    for theta, g, v in zip(params.norm_scale, grads.dnorm_scale, opt.vel_scale):
        v *= momentum
        v += g
        theta -= lr * v
    for theta, g, v in zip(params.norm_shift, grads.dnorm_shift, opt.vel_shift):
        v *= momentum
        v += g
        theta -= lr * v
    return params, opt


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: tenfold decrease every ``lr_decay_every`` epochs."""
    if epoch < 0:
        raise ParameterError(f"epoch must be nonnegative, got {epoch}")
    return cfg.lr0 * 0.1 ** (epoch // cfg.lr_decay_every)


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss: float
    guidance_loss: float
    train_acc: float
    val_acc: float
    alphas: list[float]
    total_spikes: int


def _check_data(spec: ModelSpec, dataset: SpikeDataset, cfg: TrainConfig) -> None:
    if dataset.n_channels != spec.layer_sizes[0]:
        raise ConsistencyError(
            f"dataset has {dataset.n_channels} channels, model expects {spec.layer_sizes[0]}")
    if dataset.n_classes != spec.n_classes:
        raise ConsistencyError(
            f"dataset has {dataset.n_classes} classes, model outputs {spec.n_classes}")
    if dataset.n_timesteps != cfg.T:
        raise ConsistencyError(
            f"dataset timesteps {dataset.n_timesteps} differ from configured T {cfg.T}")


def _batch_inputs(ds: SpikeDataset, idx: np.ndarray) -> np.ndarray:
    return ds.inputs[idx].transpose(1, 0, 2).astype(numeric.float_dtype())


def _guidance_terms(logits: np.ndarray, guidance: GuidanceConfig, rng: numeric.RngState):
    """Per-pair guidance losses, their drop weights, and the combined logit
    gradient contribution (weights are constants w.r.t. differentiation)."""
    T = logits.shape[0]
    losses, grads_s, grads_t = [], [], []
    for j in range(T - 1):
        if guidance.mode == GUIDANCE_KL:
            loss_j, g_s, g_t = kl_guidance_with_grads(
                logits[j], logits[j + 1], guidance.temperature, guidance.detach_teacher)
        else:
            loss_j, g_s, g_t = mse_guidance_with_grads(
                logits[j], logits[j + 1], guidance.detach_teacher)
        losses.append(loss_j)
        grads_s.append(g_s)
        grads_t.append(g_t)
    weights, combined = drop_combine(losses, guidance.drop_probability, rng)
    g_logits = np.zeros_like(logits)
    for j in range(T - 1):
        if weights[j] == 0.0:
            continue
        g_logits[j] += guidance.gamma * weights[j] * grads_s[j]
        if grads_t[j] is not None:
            g_logits[j + 1] += guidance.gamma * weights[j] * grads_t[j]
    return combined, weights, g_logits


def forward_logits(spec: ModelSpec, params: ModelParams, dataset: SpikeDataset,
                   batch_size: int = 256, rng: numeric.RngState | None = None,
                   threads: int = 1) -> np.ndarray:
    """Forward-only logits (T, samples, classes) in deterministic order.

    With ``threads`` > 1, batches run in a thread pool but are reduced in
    submission order, so results match the sequential path.
    """
    n = dataset.n_samples
    batches = [np.arange(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]

    def run(idx):
        return forward_unroll(spec, params, _batch_inputs(dataset, idx), rng=rng).logits

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, batches))
    else:
        parts = [run(idx) for idx in batches]
    return np.concatenate(parts, axis=1) if parts else numeric.zeros((dataset.n_timesteps, 0, spec.n_classes))


def ensemble_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy of the timestep-averaged output; argmax ties go to the lowest class."""
    if logits.shape[1] == 0:
        return 0.0
    pred = logits.mean(axis=0).argmax(axis=1)
    return float((pred == labels).mean())


def split_train_val(n: int, val_fraction: float, rng: numeric.RngState):
    """Deterministic shuffle split; validation takes the tail fraction."""
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return order[: n - n_val], order[n - n_val:]


def train(spec: ModelSpec, dataset: SpikeDataset, cfg: TrainConfig):
    """Run the full loop and return (trained params, per-epoch metrics)."""
    with numeric.precision(cfg.float_mode):
        _check_data(spec, dataset, cfg)
        root = numeric.RngState(cfg.seed)
        init_rng = root.child("init")
        split_rng = root.child("split")
        shuffle_rng = root.child("shuffle")
        drop_rng = root.child("drop")
        mp_rng = root.child("mp-init") if spec.neuron.mp_init is not None else None

        params = init_params(spec, init_rng, beta_init=cfg.beta_init)
        opt = OptimizerState.zeros_like(params)
        train_idx, val_idx = split_train_val(dataset.n_samples, cfg.val_fraction, split_rng)
        val_set = dataset.subset(val_idx)

        use_guidance = cfg.guidance.gamma > 0.0 and cfg.T > 1
        records: list[MetricsRecord] = []
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = train_idx[shuffle_rng.permutation(train_idx.shape[0])]
            loss_sum = guid_sum = 0.0
            correct = 0
            spikes = 0
            for start in range(0, order.shape[0], cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                x = _batch_inputs(dataset, idx)
                y = dataset.labels[idx]
                trace = forward_unroll(spec, params, x, rng=mp_rng)
                ce_loss, g_logits = ce_ensemble_with_grads(trace.logits, y)
                guid_loss = 0.0
                if use_guidance:
                    guid_loss, _, g_guid = _guidance_terms(trace.logits, cfg.guidance, drop_rng)
                    g_logits = g_logits + g_guid
                batch_loss = total_loss(guid_loss, ce_loss, cfg.guidance.gamma)
                if not np.isfinite(batch_loss):
                    raise DataError(
                        f"non-finite loss at epoch {epoch} batch {start // cfg.batch_size}: "
                        f"ce={ce_loss!r} guidance={guid_loss!r}")
                grads = backward_bptt(spec, params, trace, g_logits)
                sgd_step(params, grads, opt, lr, cfg.momentum, cfg.weight_decay)

                loss_sum += batch_loss * idx.shape[0]
                guid_sum += guid_loss * idx.shape[0]
                pred = trace.logits.mean(axis=0).argmax(axis=1)
                correct += int((pred == y).sum())
                spikes += count_spikes(trace).total
            n_train = order.shape[0]
            val_logits = forward_logits(spec, params, val_set, cfg.batch_size,
                                        rng=mp_rng, threads=cfg.eval_threads)
            records.append(MetricsRecord(
                epoch=epoch,
                lr=lr,
                train_loss=loss_sum / n_train,
                guidance_loss=guid_sum / n_train,
                train_acc=correct / n_train,
                val_acc=ensemble_accuracy(val_logits, val_set.labels),
                alphas=[alpha_from_beta(b) for b in params.betas],
                total_spikes=spikes,
            ))
        return params, records


def metrics_csv(records: list[MetricsRecord]) -> str:
    """Render per-epoch metrics as CSV; floats use 9 significant digits."""
    n_alpha = len(records[0].alphas) if records else 0
    header = ["epoch", "lr", "train_loss", "guidance_loss", "train_acc", "val_acc"]
    header += [f"alpha_l{i + 1}" for i in range(n_alpha)]
    header += ["total_spikes"]
    lines = [",".join(header)]
    for r in records:
        row = [str(r.epoch), f"{r.lr:.9g}", f"{r.train_loss:.9g}", f"{r.guidance_loss:.9g}",
               f"{r.train_acc:.9g}", f"{r.val_acc:.9g}"]
        row += [f"{a:.9g}" for a in r.alphas]
        row += [str(r.total_spikes)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
