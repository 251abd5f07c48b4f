"""Command-line entry point: train, eval, and analyze subcommands driven by
a JSON config.

Every run writes into one output directory: the resolved config copy, the
delimited outputs, the matching figures, and the checkpoint.  All file
writes are atomic, so an interrupted run never leaves half-written
artifacts.  A ``--seed`` override flows into every random stream, including
synthetic data generation when the config gives no explicit data seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, figures, numeric
from .data import SpikeDataset, gen_temporal_patterns, load_dataset
from .errors import (
    ConsistencyError,
    DataError,
    DimensionError,
    FormatError,
    ParameterError,
)
from .fileio import atomic_write_text
from .network import (
    ModelSpec,
    count_spikes,
    forward_unroll,
    load_checkpoint,
    save_checkpoint,
)
from .neuron import NeuronConfig
from .objective import GuidanceConfig, ensemble_metrics
from .training import TrainConfig, forward_logits, metrics_csv, train

_DEFAULTS = {
    "data": {
        "path": None,
        "synthetic": None,
    },
    "synthetic": {
        "classes": 4,
        "channels": 40,
        "samples_per_class": 100,
        "jitter": 0.1,
        "seed": None,
    },
    "model": {
        "hidden": [64],
        "readout": "membrane",
        "smoothing": True,
        "normalize": False,
        "full_alpha_chain": False,
        "tau": 2.0,
        "threshold": 1.0,
        "surrogate_width": 1.0,
        "mp_init": "zero",
        "beta_init": 0.0,
    },
    "train": {
        "timesteps": 5,
        "epochs": 30,
        "batch_size": 32,
        "lr0": 0.1,
        "lr_decay_every": 30,
        "weight_decay": 1e-3,
        "momentum": 0.9,
        "seed": 0,
        "val_fraction": 0.1,
        "float_mode": "float32",
    },
    "guidance": {
        "gamma": 1.0,
        "drop_probability": 0.5,
        "temperature": 2.0,
        "mode": "kl",
        "detach_teacher": True,
    },
    "analysis": {
        "bins": 64,
        "range_mode": "pooled",
        "max_samples": 512,
        "alpha_div": 1.0,
        "sensitivity_tau": [2.0],
        "sensitivity_alpha": [0.25, 0.5, 0.75],
        "sensitivity_delta_t": [1, 2, 3, 4, 5, 6, 7, 8],
    },
}


def _reject_unknown(section: str, given: dict, known: dict) -> None:
    for key in given:
        if key not in known:
            hint = difflib.get_close_matches(key, known, n=1)
            suggestion = f" (did you mean {hint[0]!r}?)" if hint else ""
            where = f"{section}.{key}" if section else key
            raise ParameterError(f"unknown config key {where!r}{suggestion}")


def _merged(section: str, given: dict | None, defaults: dict) -> dict:
    given = given or {}
    if not isinstance(given, dict):
        raise ParameterError(f"config section {section!r} must be an object")
    _reject_unknown(section, given, defaults)
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class RunConfig:
    """Fully resolved run configuration with defaults applied."""

    data_path: str | None
    synthetic: dict | None
    model: dict
    train: dict
    guidance: dict
    analysis: dict

    def resolved(self) -> dict:
        return {
            "data": {"path": self.data_path, "synthetic": self.synthetic},
            "model": self.model,
            "train": self.train,
            "guidance": self.guidance,
            "analysis": self.analysis,
        }

    def neuron_config(self) -> NeuronConfig:
        mp = self.model["mp_init"]
        if mp == "zero":
            mp_init = None
        elif mp == "uniform":
            mp_init = (0.0, float(self.model["threshold"]))
        elif isinstance(mp, (list, tuple)) and len(mp) == 2:
            mp_init = (float(mp[0]), float(mp[1]))
        else:
            raise ParameterError(f"model.mp_init must be 'zero', 'uniform' or [low, high], got {mp!r}")
        return NeuronConfig(tau=self.model["tau"], threshold=self.model["threshold"],
                            surrogate_width=self.model["surrogate_width"], mp_init=mp_init)

    def model_spec(self, n_channels: int, n_classes: int) -> ModelSpec:
        sizes = [n_channels, *[int(h) for h in self.model["hidden"]], n_classes]
        return ModelSpec(layer_sizes=tuple(sizes), neuron=self.neuron_config(),
                         smoothing_enabled=bool(self.model["smoothing"]),
                         readout=self.model["readout"],
                         normalize=bool(self.model["normalize"]),
                         full_alpha_chain=bool(self.model["full_alpha_chain"]))

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(temperature=self.guidance["temperature"],
                              drop_probability=self.guidance["drop_probability"],
                              gamma=self.guidance["gamma"],
                              mode=self.guidance["mode"],
                              detach_teacher=bool(self.guidance["detach_teacher"]))

    def train_config(self, float_mode: str, eval_threads: int) -> TrainConfig:
        return TrainConfig(T=self.train["timesteps"], epochs=self.train["epochs"],
                           batch_size=self.train["batch_size"], lr0=self.train["lr0"],
                           lr_decay_every=self.train["lr_decay_every"],
                           weight_decay=self.train["weight_decay"],
                           momentum=self.train["momentum"],
                           guidance=self.guidance_config(),
                           seed=self.train["seed"], float_mode=float_mode,
                           beta_init=self.model["beta_init"],
                           val_fraction=self.train["val_fraction"],
                           eval_threads=eval_threads)


def parse_config(source) -> RunConfig:
    """Parse and validate a JSON config from a path, file object, or text.

    Missing keys take the defaults; unknown keys are
    rejected with a nearest-key suggestion.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        path = Path(source)
        if path.exists():
            text = path.read_text()
        else:
            raise FormatError(f"config file not found: {source}")
    try:
        raw = json.loads(text or "{}")
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"config parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ParameterError("config root must be a JSON object")
    _reject_unknown("", raw, _DEFAULTS)
    data = _merged("data", raw.get("data"), _DEFAULTS["data"])
    synthetic = data["synthetic"]
    if synthetic is not None:
        synthetic = _merged("data.synthetic", synthetic, _DEFAULTS["synthetic"])
    cfg = RunConfig(
        data_path=data["path"],
        synthetic=synthetic,
        model=_merged("model", raw.get("model"), _DEFAULTS["model"]),
        train=_merged("train", raw.get("train"), _DEFAULTS["train"]),
        guidance=_merged("guidance", raw.get("guidance"), _DEFAULTS["guidance"]),
        analysis=_merged("analysis", raw.get("analysis"), _DEFAULTS["analysis"]),
    )
    # Construct the typed configs now so range violations surface at parse time.
    cfg.guidance_config()
    cfg.neuron_config()
    cfg.train_config(cfg.train["float_mode"], 1)
    if cfg.train["float_mode"] not in ("float32", "float64"):
        raise ParameterError(f"train.float_mode must be float32 or float64, got {cfg.train['float_mode']!r}")
    return cfg


def _load_data(cfg: RunConfig, seed: int, timesteps: int) -> SpikeDataset:
    if cfg.data_path is not None:
        return load_dataset(cfg.data_path)
    syn = cfg.synthetic if cfg.synthetic is not None else dict(_DEFAULTS["synthetic"])
    data_seed = syn["seed"] if syn["seed"] is not None else seed
    return gen_temporal_patterns(n_classes=syn["classes"], channels=syn["channels"],
                                 T=timesteps, samples_per_class=syn["samples_per_class"],
                                 jitter_prob=syn["jitter"], seed=data_seed)


def _float_row(values) -> str:
    return ",".join(f"{v:.9g}" if isinstance(v, float) else str(v) for v in values)


def _eval_threads() -> int:
    raw = os.environ.get("SMOOTHSNN_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise ParameterError(f"SMOOTHSNN_THREADS must be an integer, got {raw!r}")


def _write_config_copy(out: Path, cfg: RunConfig, seed: int, float_mode: str) -> None:
    resolved = cfg.resolved()
    resolved["train"] = dict(resolved["train"], seed=seed, float_mode=float_mode)
    atomic_write_text(out / "config.json", json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def run_train(cfg: RunConfig, out: Path, seed: int, float_mode: str) -> int:
    threads = _eval_threads()
    train_cfg = dataclasses.replace(cfg.train_config(float_mode, threads), seed=seed)
    dataset = _load_data(cfg, seed, train_cfg.T)
    spec = cfg.model_spec(dataset.n_channels, dataset.n_classes)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_copy(out, cfg, seed, float_mode)
    params, records = train(spec, dataset, train_cfg)
    with numeric.precision(float_mode):
        save_checkpoint(out / "checkpoint.snn", spec, params)
    atomic_write_text(out / "metrics.csv", metrics_csv(records))
    figures.plot_training_curves(records, out / "training_curves.png")
    return 0


def run_eval(cfg: RunConfig, out: Path, seed: int, float_mode: str) -> int:
    threads = _eval_threads()
    checkpoint = out / "checkpoint.snn"
    if not checkpoint.exists():
        raise FormatError(f"no checkpoint at {checkpoint}; run train first")
    with numeric.precision(float_mode):
        spec, params = load_checkpoint(checkpoint)
        dataset = _load_data(cfg, seed, cfg.train["timesteps"])
        if dataset.n_channels != spec.layer_sizes[0] or dataset.n_classes != spec.n_classes:
            raise ConsistencyError(
                f"dataset ({dataset.n_channels} ch, {dataset.n_classes} classes) does not match "
                f"checkpoint ({spec.layer_sizes[0]} ch, {spec.n_classes} classes)")
        mp_rng = numeric.RngState(seed).child("mp-init") if spec.neuron.mp_init is not None else None
        accs = analysis.prefix_ensemble_eval(spec, params, dataset, rng=mp_rng, threads=threads)

        lines = ["k,accuracy"] + [_float_row((k + 1, float(a))) for k, a in enumerate(accs)]
        atomic_write_text(out / "prefix_accuracy.csv", "\n".join(lines) + "\n")
        figures.plot_prefix_accuracy({"checkpoint": accs}, out / "prefix_accuracy.png")

        counts = None
        batch = 256
        for start in range(0, dataset.n_samples, batch):
            idx = np.arange(start, min(start + batch, dataset.n_samples))
            x = dataset.inputs[idx].transpose(1, 0, 2).astype(numeric.float_dtype())
            c = count_spikes(forward_unroll(spec, params, x, rng=mp_rng)).per_layer
            counts = c if counts is None else counts + c
        rows = ["layer,timestep,count"]
        if counts is not None:
            for j in range(counts.shape[0]):
                for t in range(counts.shape[1]):
                    rows.append(f"{j + 1},{t + 1},{counts[j, t]}")
            rows.append(f"total,,{int(counts.sum())}")
        atomic_write_text(out / "spike_counts.csv", "\n".join(rows) + "\n")
    return 0


def run_analyze(cfg: RunConfig, out: Path, seed: int, float_mode: str) -> int:
    threads = _eval_threads()
    checkpoint = out / "checkpoint.snn"
    if not checkpoint.exists():
        raise FormatError(f"no checkpoint at {checkpoint}; run train first")
    adir = out / "analysis"
    adir.mkdir(parents=True, exist_ok=True)
    opts = cfg.analysis
    with numeric.precision(float_mode):
        spec, params = load_checkpoint(checkpoint)
        dataset = _load_data(cfg, seed, cfg.train["timesteps"])
        n_keep = min(int(opts["max_samples"]), dataset.n_samples)
        subset = dataset.subset(np.arange(n_keep))
        mp_rng = numeric.RngState(seed).child("mp-init") if spec.neuron.mp_init is not None else None
        x = subset.inputs.transpose(1, 0, 2).astype(numeric.float_dtype())
        trace = forward_unroll(spec, params, x, rng=mp_rng)

        stat_rows = ["layer,timestep,mean,std"]
        hist_rows = ["layer,timestep,bin,left,right,count"]
        sims_by_layer = {}
        for j in range(len(trace.states)):
            stats = analysis.mp_stats(trace, j, bins=int(opts["bins"]),
                                      range_mode=opts["range_mode"])
            for t in range(stats.histograms.shape[0]):
                stat_rows.append(_float_row((j + 1, t + 1, float(stats.means[t]),
                                             float(stats.stds[t]))))
                for b in range(stats.histograms.shape[1]):
                    hist_rows.append(_float_row((j + 1, t + 1, b,
                                                 float(stats.bin_edges[b]),
                                                 float(stats.bin_edges[b + 1]),
                                                 int(stats.histograms[t, b]))))
            if stats.histograms.shape[0] >= 2:
                sims_by_layer[j] = analysis.adjacent_cosine(stats)
            figures.plot_mp_distributions(stats, adir / f"mp_layer{j + 1}.png")
        atomic_write_text(adir / "mp_stats.csv", "\n".join(stat_rows) + "\n")
        atomic_write_text(adir / "mp_hist.csv", "\n".join(hist_rows) + "\n")

        cos_rows = ["layer,t_from,t_to,cosine"]
        for j, sims in sorted(sims_by_layer.items()):
            for t, s in enumerate(sims):
                cos_rows.append(_float_row((j + 1, t + 1, t + 2, float(s))))
        atomic_write_text(adir / "adjacent_cosine.csv", "\n".join(cos_rows) + "\n")
        if sims_by_layer:
            figures.plot_adjacent_cosine(sims_by_layer, adir / "adjacent_cosine.png")

        sens_rows = ["tau,alpha,delta_t,epsilon,vanilla,smoothed,ratio"]
        fig_rows = []
        for tau in opts["sensitivity_tau"]:
            for alpha in opts["sensitivity_alpha"]:
                for dt in opts["sensitivity_delta_t"]:
                    q = analysis.SensitivityQuery(tau=tau, alpha=alpha, delta_t=int(dt))
                    vanilla, smoothed = analysis.temporal_sensitivity(q)
                    sens_rows.append(_float_row((float(tau), float(alpha), int(dt),
                                                 float(q.effective_epsilon),
                                                 float(vanilla), float(smoothed),
                                                 float(smoothed / vanilla))))
                    fig_rows.append({"tau": tau, "alpha": alpha, "delta_t": dt,
                                     "vanilla": vanilla, "smoothed": smoothed})
        atomic_write_text(adir / "sensitivity.csv", "\n".join(sens_rows) + "\n")
        figures.plot_sensitivity(fig_rows, adir / "sensitivity.png")

        member_logits = forward_logits(spec, params, subset, rng=mp_rng, threads=threads)
        metrics = ensemble_metrics(member_logits, subset.labels,
                                   alpha_div=float(opts["alpha_div"]))
        met_rows = ["L_s,L_d,L_a,L_ensemble,alpha_div,N",
                    _float_row((metrics.L_s, metrics.L_d, metrics.L_a,
                                metrics.L_ensemble, metrics.alpha_div, metrics.N))]
        atomic_write_text(adir / "ensemble_metrics.csv", "\n".join(met_rows) + "\n")

        atomic_write_text(adir / "logits.csv",
                          analysis.export_logits(spec, params, subset, rng=mp_rng,
                                                 threads=threads))
    return 0


def run(subcommand: str, cfg: RunConfig, out, seed: int | None = None,
        float64: bool = False, data_path=None) -> int:
    """Dispatch one subcommand; returns the process exit code."""
    if data_path is not None:
        cfg.data_path = str(data_path)
    resolved_seed = int(seed) if seed is not None else int(cfg.train["seed"])
    float_mode = "float64" if float64 else cfg.train["float_mode"]
    out = Path(out)
    handlers = {"train": run_train, "eval": run_eval, "analyze": run_analyze}
    if subcommand not in handlers:
        raise ParameterError(f"unknown subcommand {subcommand!r}")
    return handlers[subcommand](cfg, out, resolved_seed, float_mode)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="smoothsnn",
        description="Train and analyze spiking networks with membrane-potential "
                    "smoothing and adjacent-timestep guidance.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("train", "run the training loop"),
                           ("eval", "evaluate a checkpoint"),
                           ("analyze", "emit diagnostics for a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", default=None, help="JSON config path (defaults to OUT/config.json)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override every random stream")
        p.add_argument("--float64", action="store_true", help="run the engine in float64")
        p.add_argument("--data", default=None, help="override the dataset path (SPK1 file)")
    args = parser.parse_args(argv)
    try:
        config_path = args.config if args.config is not None else Path(args.out) / "config.json"
        cfg = parse_config(config_path)
        return run(args.command, cfg, args.out, seed=args.seed,
                   float64=args.float64, data_path=args.data)
    except (ParameterError, FormatError, DataError, DimensionError,
            ConsistencyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
