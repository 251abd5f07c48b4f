"""Spiking-network training engine with membrane-potential smoothing and
temporally adjacent output guidance."""

from .analysis import (
    DistributionStats,
    SensitivityQuery,
    adjacent_cosine,
    export_logits,
    mp_stats,
    prefix_ensemble_eval,
    temporal_sensitivity,
)
from .data import SpikeDataset, gen_temporal_patterns, load_dataset, poisson_encode, save_dataset
from .network import (
    ForwardTrace,
    Gradients,
    ModelParams,
    ModelSpec,
    backward_bptt,
    count_spikes,
    forward_unroll,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .neuron import (
    LayerState,
    NeuronConfig,
    alpha_from_beta,
    dspike_dalpha_local,
    lif_step,
    smoothed_lif_step,
    surrogate_grad,
)
from .numeric import RngState, matmul, precision, rng_uniform, set_float_mode, softmax_rows
from .objective import (
    EnsembleMetrics,
    GuidanceConfig,
    ce_ensemble,
    drop_combine,
    ensemble_metrics,
    kl_guidance,
    mse_guidance,
    total_loss,
)
from .training import MetricsRecord, OptimizerState, TrainConfig, lr_at, sgd_step, train

__version__ = "0.1.0"
