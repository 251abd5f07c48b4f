"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one [PASS]/[FAIL] line (visible with ``pytest -s`` or in
the captured output of failures).  The synthetic-task experiment constants
were frozen after a pilot run; the training runs are shared across the
experiment criteria through a session fixture.
"""

import numpy as np
import pytest

from smoothsnn import numeric
from smoothsnn.analysis import SensitivityQuery, adjacent_cosine, mp_stats, \
    prefix_ensemble_eval, temporal_sensitivity
from smoothsnn.cli import main as cli_main
from smoothsnn.data import gen_temporal_patterns
from smoothsnn.network import (
    ModelParams,
    ModelSpec,
    backward_bptt,
    forward_unroll,
    init_params,
    save_checkpoint,
)
from smoothsnn.neuron import NeuronConfig, alpha_from_beta, dalpha_dbeta
from smoothsnn.objective import (
    GuidanceConfig,
    drop_combine,
    ensemble_metrics,
    kl_guidance,
)
from smoothsnn.training import TrainConfig, ensemble_accuracy, forward_logits, train

from oracles import (
    lif_trace_scalar,
    network_forward,
    relative_error,
    smoothed_trace_scalar,
)
from reference_trainer import train_vanilla_reference

CFG = NeuronConfig(tau=2.0, threshold=1.0, surrogate_width=1.0)

# Synthetic-task experiment constants, frozen after the pilot run.
N_CLASSES = 4
CHANNELS = 40
T_STEPS = 5
HIDDEN = 64
TRAIN_PER_CLASS = 75
TEST_PER_CLASS = 50
JITTER = 0.17
EPOCHS = 40
LR0 = 0.05
SEEDS = (0, 1, 2, 3, 4)
# Mutual (non-detached) guidance flow: the pilot showed the one-way detached
# variant trades ensemble accuracy for early-timestep accuracy at this scale.
GUIDED = GuidanceConfig(gamma=1.0, drop_probability=0.5, temperature=2.0,
                        mode="kl", detach_teacher=False)
UNGUIDED = GuidanceConfig(gamma=0.0)


def report(criterion: str, passed: bool, detail: str = ""):
    tag = "PASS" if passed else "FAIL"
    print(f"[{tag}] {criterion}" + (f": {detail}" if detail else ""))
    assert passed, f"{criterion}: {detail}"


class TestC1Sensitivity:
    def test_criterion_1_sensitivity_exactness(self):
        v3, s3 = temporal_sensitivity(SensitivityQuery(tau=2.0, alpha=0.25, delta_t=3))
        v5, s5 = temporal_sensitivity(SensitivityQuery(tau=2.0, alpha=0.25, delta_t=5))
        ok = (abs(v3 - 0.125) < 1e-9 and abs(s3 - 0.146484375) < 1e-9
              and abs(v5 - 0.03125) < 1e-9 and abs(s5 - 0.057220458984375) < 1e-9
              and abs(s5 / v5 - 1.831) <= 1e-3)
        report("criterion 1 (temporal-sensitivity closed forms)", ok,
               f"dt=3 ({v3}, {s3}); dt=5 ({v5}, {s5}); ratio {s5 / v5:.6f}")


def _fd_weights(spec, params, x, grad_logits, h=1e-4):
    out = []
    for w in params.weights:
        g = np.zeros_like(w)
        flat, gflat = w.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float((forward_unroll(spec, params, x, relaxed=True).logits * grad_logits).sum())
            flat[i] = orig - h
            fm = float((forward_unroll(spec, params, x, relaxed=True).logits * grad_logits).sum())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


class TestC2GradientCorrectness:
    def test_criterion_2_bptt_matches_finite_differences(self):
        h = 1e-4
        worst = 0.0
        with numeric.precision("float64"):
            for T in (2, 5, 8):
                rng = np.random.default_rng(1000 + T)
                # real-valued drive and boosted weights keep the relaxed
                # network active; a silent network would make this vacuous
                x = rng.uniform(0.0, 1.5, size=(T, 3, 5))
                grad_logits = rng.normal(size=(T, 3, 3))
                for full_chain in (False, True):
                    spec = ModelSpec(layer_sizes=(5, 7, 6, 3), neuron=CFG,
                                     smoothing_enabled=True, full_alpha_chain=full_chain)
                    params = init_params(spec, numeric.RngState(50 + T).child("init"),
                                         beta_init=0.2)
                    for i, w in enumerate(params.weights):
                        w *= 2.5 if i == 0 else 4.0
                    trace = forward_unroll(spec, params, x, relaxed=True)
                    grads = backward_bptt(spec, params, trace, grad_logits)
                    assert all(np.count_nonzero(dw) > 0 for dw in grads.dW)
                    assert all(db != 0.0 for db in grads.dbeta)
                    for dw, fd in zip(grads.dW, _fd_weights(spec, params, x, grad_logits, h)):
                        worst = max(worst, relative_error(dw, fd))
                    if full_chain:
                        fd_b = []
                        for j in range(len(params.betas)):
                            orig = params.betas[j]
                            params.betas[j] = orig + h
                            fp = float((forward_unroll(spec, params, x, relaxed=True).logits
                                        * grad_logits).sum())
                            params.betas[j] = orig - h
                            fm = float((forward_unroll(spec, params, x, relaxed=True).logits
                                        * grad_logits).sum())
                            params.betas[j] = orig
                            fd_b.append((fp - fm) / (2 * h))
                    else:
                        alphas = [alpha_from_beta(b) for b in params.betas]
                        fd_b = []
                        for j in range(len(params.betas)):
                            def value(probe):
                                logits = network_forward(
                                    params.weights, x, CFG.tau, CFG.threshold,
                                    CFG.surrogate_width, alphas=alphas,
                                    probe_layer=j, probe=probe)
                                return float((logits * grad_logits).sum())
                            d_alpha = (value(h) - value(-h)) / (2 * h)
                            fd_b.append(d_alpha * dalpha_dbeta(params.betas[j]))
                    worst = max(worst, relative_error(np.array(grads.dbeta), np.array(fd_b)))
        report("criterion 2 (gradient check, relaxed model)", worst < 1e-4,
               f"max relative error {worst:.3g}")


class TestC3NeuronOracleEquivalence:
    def test_criterion_3_step_traces_bit_exact(self):
        rng = np.random.default_rng(777)
        mismatches = 0
        with numeric.precision("float64"):
            for _ in range(1000):
                h0 = float(rng.uniform(-0.5, 0.9))
                currents = rng.uniform(-0.5, 1.5, size=10).tolist()
                want_s, want_h, _ = lif_trace_scalar(h0, currents, CFG.tau, CFG.threshold)
                H = numeric.tensor([[h0]])
                for I, ws, wh in zip(currents, want_s, want_h):
                    from smoothsnn.neuron import lif_step
                    st = lif_step(H, numeric.tensor([[I]]), CFG)
                    H = st.H
                    if float(st.S[0, 0]) != ws or float(st.H[0, 0]) != wh:
                        mismatches += 1
            for _ in range(1000):
                h0 = float(rng.uniform(-0.5, 0.9))
                alpha = float(rng.uniform(0.05, 0.95))
                currents = rng.uniform(-0.5, 1.5, size=10).tolist()
                want = smoothed_trace_scalar(h0, currents, CFG.tau, CFG.threshold, alpha)
                H = numeric.tensor([[h0]])
                Hs = numeric.tensor([[h0]])
                for k, I in enumerate(currents):
                    from smoothsnn.neuron import smoothed_lif_step
                    st = smoothed_lif_step(H, Hs, numeric.tensor([[I]]), CFG, alpha)
                    H, Hs = st.H, st.H_smooth
                    if (float(st.S[0, 0]) != want[0][k] or float(st.H[0, 0]) != want[1][k]
                            or float(st.H_smooth[0, 0]) != want[2][k]):
                        mismatches += 1
        report("criterion 3 (neuron oracle bit-exact equivalence)", mismatches == 0,
               f"{mismatches} mismatching steps over 2000 sequences")


class TestC4DropCombine:
    def test_criterion_4_drop_statistics(self):
        losses = [0.2, 0.9, 0.4, 0.1]
        rng = numeric.RngState(20240501)
        trials = 10_000
        kept = np.zeros(4)
        sums_exact = True
        for _ in range(trials):
            w, _ = drop_combine(losses, 0.5, rng)
            kept += (w > 0)
            if float(np.sum(w)) != 1.0:
                sums_exact = False
        max_kept = kept[1] == trials
        rates = kept[[0, 2, 3]] / trials
        in_band = bool(np.all((0.48 <= rates) & (rates <= 0.52)))
        report("criterion 4 (drop-combine statistics)",
               max_kept and in_band and sums_exact,
               f"max kept {int(kept[1])}/{trials}, non-max rates {np.round(rates, 4)}, "
               f"exact weight sums: {sums_exact}")


class TestC5GuidanceExactness:
    def test_criterion_5_kl_values(self):
        loss = kl_guidance(np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]]), temperature=2.0)
        anchor_ok = abs(loss - 0.4441) <= 1e-3
        rng = np.random.default_rng(5)
        self_ok = True
        for _ in range(100):
            x = rng.normal(scale=4, size=(3, 6))
            if abs(kl_guidance(x, x, temperature=2.0)) > 1e-9:
                self_ok = False
        report("criterion 5 (guidance loss exactness)", anchor_ok and self_ok,
               f"kl([0,0],[2,0])={loss:.6f}; self-KL zero within 1e-9: {self_ok}")


def _experiment_datasets(seed):
    per = TRAIN_PER_CLASS + TEST_PER_CLASS
    full = gen_temporal_patterns(N_CLASSES, CHANNELS, T_STEPS, per, JITTER, seed=1000 + seed)
    train_idx, test_idx = [], []
    for cls in range(N_CLASSES):
        base = cls * per
        train_idx.extend(range(base, base + TRAIN_PER_CLASS))
        test_idx.extend(range(base + TRAIN_PER_CLASS, base + per))
    return full.subset(np.array(train_idx)), full.subset(np.array(test_idx))


def _train_variant(smoothing, guidance, seed, train_set):
    spec = ModelSpec(layer_sizes=(CHANNELS, HIDDEN, N_CLASSES), neuron=CFG,
                     smoothing_enabled=smoothing)
    cfg = TrainConfig(T=T_STEPS, epochs=EPOCHS, batch_size=32, lr0=LR0,
                      lr_decay_every=30, weight_decay=1e-3, momentum=0.9,
                      guidance=guidance, seed=seed)
    params, records = train(spec, train_set, cfg)
    return spec, params, records


@pytest.fixture(scope="session")
def experiment_runs():
    """All 20 training runs of the synthetic direction-of-effect experiment."""
    runs = {}
    for seed in SEEDS:
        train_set, test_set = _experiment_datasets(seed)
        for name, smoothing, guidance in (("vanilla", False, UNGUIDED),
                                          ("smooth", True, UNGUIDED),
                                          ("guidance", False, GUIDED),
                                          ("both", True, GUIDED)):
            spec, params, records = _train_variant(smoothing, guidance, seed, train_set)
            logits = forward_logits(spec, params, test_set)
            runs.setdefault(name, []).append({
                "spec": spec, "params": params, "records": records,
                "test_set": test_set,
                "test_acc": ensemble_accuracy(logits, test_set.labels),
                "prefix": prefix_ensemble_eval(spec, params, test_set),
            })
    return runs


class TestC6DirectionOfEffect:
    def test_criterion_6a_mean_accuracy(self, experiment_runs):
        mean_both = np.mean([r["test_acc"] for r in experiment_runs["both"]])
        mean_van = np.mean([r["test_acc"] for r in experiment_runs["vanilla"]])
        report("criterion 6a (smoothing+guidance mean accuracy)", mean_both >= mean_van,
               f"both {mean_both:.4f} vs vanilla {mean_van:.4f}")

    def test_criterion_6b_first_timestep_gap(self, experiment_runs):
        k1_both = np.mean([r["prefix"][0] for r in experiment_runs["both"]])
        k1_van = np.mean([r["prefix"][0] for r in experiment_runs["vanilla"]])
        gap = k1_both - k1_van
        report("criterion 6b (k=1 prefix accuracy gap >= 10pp)", gap >= 0.10,
               f"k=1 {k1_van:.4f} -> {k1_both:.4f} (gap {gap:+.4f})")

    def test_criterion_6c_each_component_alone(self, experiment_runs):
        details = []
        ok = True
        for name in ("smooth", "guidance"):
            wins = sum(r["test_acc"] >= v["test_acc"]
                       for r, v in zip(experiment_runs[name], experiment_runs["vanilla"]))
            details.append(f"{name} {wins}/5")
            ok = ok and wins >= 4
        report("criterion 6c (each component alone >= vanilla in >= 4/5 seeds)", ok,
               ", ".join(details))

    def test_training_smoke_accuracy(self, experiment_runs):
        # pilot-frozen end-to-end check: both configurations fit the task
        worst = min(min(r["records"][-1].train_acc for r in experiment_runs[name])
                    for name in ("vanilla", "both"))
        report("train-accuracy smoke (> 90% final train accuracy)", worst > 0.9,
               f"worst final train accuracy {worst:.4f}")


class TestC7DistributionConsistency:
    def test_criterion_7_adjacent_cosine(self, experiment_runs):
        wins = 0
        pairs = []
        for sm, van in zip(experiment_runs["smooth"], experiment_runs["vanilla"]):
            values = {}
            for label, run in (("smooth", sm), ("vanilla", van)):
                x = run["test_set"].inputs.transpose(1, 0, 2).astype(numeric.float_dtype())
                trace = forward_unroll(run["spec"], run["params"], x)
                sims = []
                for layer in range(len(trace.states)):
                    sims.extend(adjacent_cosine(mp_stats(trace, layer)))
                values[label] = float(np.mean(sims))
            pairs.append((values["smooth"], values["vanilla"]))
            wins += values["smooth"] > values["vanilla"]
        report("criterion 7 (membrane-distribution consistency)", wins >= 4,
               f"smoothed higher in {wins}/5 seeds; pairs "
               + ", ".join(f"({s:.4f} vs {v:.4f})" for s, v in pairs))


class TestC8AblationIdentity:
    def test_criterion_8_gamma_zero_checkpoint_bytes(self, tmp_path):
        dataset = gen_temporal_patterns(3, 12, 4, samples_per_class=20,
                                        jitter_prob=0.1, seed=31)
        sizes = (12, 10, 3)
        spec = ModelSpec(layer_sizes=sizes, neuron=CFG, smoothing_enabled=False)
        cfg = TrainConfig(T=4, epochs=3, batch_size=8, lr0=0.05, lr_decay_every=30,
                          weight_decay=1e-3, momentum=0.9,
                          guidance=GuidanceConfig(gamma=0.0), seed=7)
        params, _ = train(spec, dataset, cfg)
        save_checkpoint(tmp_path / "engine.snn", spec, params)

        ref_weights = train_vanilla_reference(
            sizes, dataset, T=4, epochs=3, batch_size=8, lr0=0.05, lr_decay_every=30,
            weight_decay=1e-3, momentum=0.9, seed=7)
        ref_params = ModelParams(weights=ref_weights)
        save_checkpoint(tmp_path / "reference.snn", spec, ref_params)

        same = (tmp_path / "engine.snn").read_bytes() == (tmp_path / "reference.snn").read_bytes()
        report("criterion 8 (gamma=0 ablation bit-identical to reference trainer)", same,
               "checkpoint bytes equal" if same else "checkpoint bytes differ")


class TestC9Determinism:
    def test_criterion_9_repeat_runs_byte_identical(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(
            '{"data": {"synthetic": {"classes": 3, "channels": 10, "samples_per_class": 15}},'
            ' "model": {"hidden": [8]},'
            ' "train": {"timesteps": 3, "epochs": 2, "batch_size": 8}}')
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        rc1 = cli_main(["train", "--config", str(config), "--out", str(out1), "--seed", "11"])
        rc2 = cli_main(["train", "--config", str(config), "--out", str(out2), "--seed", "11"])
        metrics_same = (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
        ckpt_same = (out1 / "checkpoint.snn").read_bytes() == (out2 / "checkpoint.snn").read_bytes()
        report("criterion 9 (repeat-run determinism)",
               rc1 == 0 and rc2 == 0 and metrics_same and ckpt_same,
               f"metrics identical: {metrics_same}, checkpoints identical: {ckpt_same}")


class TestC10EnsembleMetrics:
    def test_criterion_10_consistency(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(1, 8, 5))
        labels = rng.integers(0, 5, size=8)
        single = ensemble_metrics(logits, labels, gamma_weights=[1.0])
        single_ok = abs(single.L_s - single.L_a) <= 1e-7

        pair = ensemble_metrics(np.zeros((2, 4, 2)), [0, 1, 0, 1])
        pair_ok = pair.L_d == pytest.approx(0.5, abs=1e-12)
        report("criterion 10 (ensemble metrics consistency)", single_ok and pair_ok,
               f"|L_s - L_a| = {abs(single.L_s - single.L_a):.2e}, "
               f"identical-member L_d = {pair.L_d}")
