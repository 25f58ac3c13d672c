import itertools
import json
import os

import numpy as np
import pytest

from gradlab.checkpoint import load_checkpoint, save_checkpoint
from gradlab.errors import ConfigError, InputError, NumericError
from gradlab.harness import (
    ExperimentConfig,
    bootstrap_ci,
    parse_config,
    read_csv_rows,
    run_experiment,
    run_sweep,
    summarize,
)
from gradlab.networks import ArchitectureSpec, build_network
from gradlab.optim import make_optimizer_state
from gradlab.rng import make_rng

MINIMAL = """
[experiment]
task = supervised_stationary
"""

FULL = """
# demo experiment
[experiment]
task = pqn_gridworld
seeds = 0, 1
budget = 2048
probe_every = 1
[architecture]
topology = multiskip
depth = large          # expands to 8 layers
width = 16
feat_dim = 24
[optimizer]
kind = kron
learning_rate = 1e-3
damping = 1e-3
[task]
grid_size = 4
n_envs = 8
n_steps = 16
minibatches = 2
[probes]
hutchinson_samples = 2
probe_batch_size = 64
"""


class TestParseConfig:
    def test_minimal_fills_defaults(self):
        cfg = parse_config(MINIMAL)
        cfg_dict = cfg.echo()
        assert cfg.budget == 100  # epochs from the CIFAR-10 table
        assert cfg.learning_rate == 2.5e-4
        assert cfg.optimizer == "adam"
        assert cfg.seeds == [0, 1, 2]
        assert cfg_dict["task_options"] == {}

    def test_depth_class_expansion(self):
        cfg = parse_config(FULL)
        assert cfg.arch.n_layers == 8
        assert cfg.arch.topology == "multiskip"
        assert cfg.optimizer == "kron"

    def test_pqn_defaults_enable_layernorm(self):
        cfg = parse_config("[experiment]\ntask = pqn_gridworld\n")
        assert cfg.arch.use_layernorm
        assert cfg.optimizer == "radam"
        assert cfg.budget == 300_000

    def test_explicit_layernorm_wins(self):
        cfg = parse_config("[experiment]\ntask = pqn_gridworld\n[architecture]\nuse_layernorm = false\n")
        assert not cfg.arch.use_layernorm

    def test_misspelled_key_names_line(self):
        text = "[experiment]\ntask = supervised_stationary\nbudgett = 7\n"
        with pytest.raises(ConfigError) as exc:
            parse_config(text)
        assert "budgett" in str(exc.value) and "line 3" in str(exc.value)

    def test_unknown_section(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("[experimnt]\ntask = x\n")
        assert "line 1" in str(exc.value)

    def test_bad_value_names_line(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("[experiment]\ntask = supervised_stationary\nbudget = soon\n")
        assert "line 3" in str(exc.value)

    def test_unknown_task(self):
        with pytest.raises(ConfigError):
            parse_config("[experiment]\ntask = chess\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("[experiment]\ntask = supervised_stationary\nbudget = 1\nbudget = 2\n")
        assert "line 4" in str(exc.value)


def quick_supervised_config(out_dir, seeds=(0,), epochs=2):
    return ExperimentConfig(
        task="supervised_stationary",
        seeds=list(seeds),
        budget=epochs,
        out_dir=str(out_dir),
        arch=ArchitectureSpec(depth=1, width=16, feat_dim=8),
        task_options={"class_count": 4, "dim": 8, "n_train": 128, "n_test": 64, "margin": 6.0},
        probe=__import__("gradlab.diagnostics", fromlist=["ProbeConfig"]).ProbeConfig(
            hutchinson_samples=2, probe_batch_size=64
        ),
    )


class TestRunExperiment:
    def test_two_seed_run_emits_matching_schemas(self, tmp_path):
        cfg = quick_supervised_config(tmp_path, seeds=(0, 1))
        result = run_experiment(cfg)
        assert result["n_failed"] == 0
        csvs = sorted(p for p in os.listdir(tmp_path) if p.endswith(".csv"))
        assert len(csvs) == 2
        headers = [open(tmp_path / c).readline() for c in csvs]
        assert headers[0] == headers[1]

    def test_rerun_is_bit_identical_modulo_wall_ms(self, tmp_path):
        cfg_a = quick_supervised_config(tmp_path / "a")
        cfg_b = quick_supervised_config(tmp_path / "b")
        run_experiment(cfg_a)
        run_experiment(cfg_b)
        name = next(p for p in os.listdir(tmp_path / "a") if p.endswith(".csv"))

        def strip_wall(path):
            rows = read_csv_rows(path)
            return [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]

        assert strip_wall(tmp_path / "a" / name) == strip_wall(tmp_path / "b" / name)

    def test_nan_injection_fails_run_but_not_siblings(self, tmp_path, monkeypatch):
        import gradlab.supervised as sup

        real = sup.cross_entropy_with_softmax
        calls = {"n": 0}

        def poisoned(logits, labels):
            calls["n"] += 1
            loss, dlogits = real(logits, labels)
            if calls["n"] == 1:
                return float("nan"), dlogits
            return loss, dlogits

        monkeypatch.setattr(sup, "cross_entropy_with_softmax", poisoned)
        cfg = quick_supervised_config(tmp_path, seeds=(0, 1))
        result = run_experiment(cfg)
        statuses = {r["seed"]: r["status"] for r in result["runs"]}
        assert statuses[0] == "failed" and statuses[1] == "ok"
        assert result["n_failed"] == 1
        events = [json.loads(l) for l in open(tmp_path / f"{cfg.run_id(0)}.jsonl")]
        assert any(e["event"] == "run_end" and e["status"] == "failed" for e in events)

    def test_schema_hash_recorded(self, tmp_path):
        cfg = quick_supervised_config(tmp_path)
        run_experiment(cfg)
        events = [json.loads(l) for l in open(tmp_path / f"{cfg.run_id(0)}.jsonl")]
        schema = next(e for e in events if e["event"] == "schema")
        assert len(schema["schema_hash"]) == 16
        header = open(tmp_path / f"{cfg.run_id(0)}.csv").readline().strip().split(",")
        assert schema["columns"] == header
        assert header[:4] == ["run_id", "seed", "step", "wall_ms"]

    def test_checkpoint_written_and_loadable(self, tmp_path):
        cfg = quick_supervised_config(tmp_path)
        run_experiment(cfg)
        params, state = load_checkpoint(tmp_path / f"{cfg.run_id(0)}.ckpt.npz")
        assert params.spec.depth == 1
        assert state.kind == "adam" and state.t > 0


class TestBootstrap:
    def test_identical_values_zero_width(self):
        lo, hi = bootstrap_ci([3.0, 3.0, 3.0])
        assert lo == hi == 3.0

    def test_three_value_enumeration_oracle(self):
        values = np.array([1.0, 2.0, 4.0])
        lo, hi = bootstrap_ci(values)
        means = [np.mean([values[i], values[j], values[k]]) for i, j, k in itertools.product(range(3), repeat=3)]
        assert lo == pytest.approx(np.percentile(means, 2.5))
        assert hi == pytest.approx(np.percentile(means, 97.5))

    def test_monte_carlo_path_deterministic(self):
        values = np.arange(10.0)
        assert bootstrap_ci(values) == bootstrap_ci(values)

    def test_empty_raises(self):
        with pytest.raises(InputError):
            bootstrap_ci([])


class TestSummarize:
    def test_single_run_summary(self, tmp_path):
        cfg = quick_supervised_config(tmp_path, epochs=3)
        run_experiment(cfg)
        summary = summarize(str(tmp_path))
        run = summary["runs"][cfg.run_id(0)]
        assert run["curve_metric"] == "accuracy"
        assert len(run["steps"]) == 3
        assert "final_accuracy" not in run["final"]  # finals come from the row fields
        assert "accuracy" in run["final"]

    def test_empty_dir_raises(self, tmp_path):
        with pytest.raises(InputError):
            summarize(str(tmp_path))

    def test_medians_match_recompute(self, tmp_path):
        cfg = quick_supervised_config(tmp_path, epochs=4)
        run_experiment(cfg)
        summary = summarize(str(tmp_path))
        rows = read_csv_rows(tmp_path / f"{cfg.run_id(0)}.csv")
        medians = summary["runs"][cfg.run_id(0)]["grad_norm_medians"]
        for i, med in enumerate(medians):
            assert med == pytest.approx(float(np.median([r[f"grad_norm_L{i}"] for r in rows])))

    def test_shuffle_run_recovery_phases(self, tmp_path):
        cfg = ExperimentConfig(
            task="supervised_shuffle",
            seeds=[0],
            budget=10,
            out_dir=str(tmp_path),
            arch=ArchitectureSpec(depth=1, width=16, feat_dim=8),
            task_options={
                "class_count": 4,
                "dim": 8,
                "n_train": 128,
                "n_test": 64,
                "margin": 6.0,
                "shuffle_period": 2,
            },
            probe=__import__("gradlab.diagnostics", fromlist=["ProbeConfig"]).ProbeConfig(
                hutchinson_samples=2, probe_batch_size=64
            ),
        )
        run_experiment(cfg)
        summary = summarize(str(tmp_path))
        phases = summary["runs"][cfg.run_id(0)]["recovery"]
        assert len(phases) == 5  # 10 epochs, period 2
        for p in phases:
            assert set(p) == {"min_accuracy", "max_accuracy", "mean_accuracy"}

    def test_group_bands_cover_mean(self, tmp_path):
        cfg = quick_supervised_config(tmp_path, seeds=(0, 1, 2), epochs=2)
        run_experiment(cfg)
        summary = summarize(str(tmp_path))
        (gid, group), = summary["groups"].items()
        assert group["n_runs"] == 3
        for lo, m, hi in zip(group["ci_lo"], group["mean"], group["ci_hi"]):
            assert lo <= m <= hi


class TestSweep:
    def test_grid_of_cells(self, tmp_path):
        base = quick_supervised_config(tmp_path)
        summary = run_sweep(base, depths=[1, 2], widths=[8, 16], out_dir=str(tmp_path))
        assert len(summary["cells"]) == 4
        assert (tmp_path / "sweep_summary.json").exists()
        for cell in summary["cells"].values():
            assert cell["n_ok"] == 1
            lo, hi = cell["ci"]
            assert lo <= cell["mean"] <= hi

    def test_empty_axes_raise(self, tmp_path):
        with pytest.raises(ConfigError):
            run_sweep(quick_supervised_config(tmp_path), depths=[], widths=[1])


class TestCheckpointRoundTrip:
    def test_network_bit_exact(self, tmp_path):
        spec = ArchitectureSpec(topology="multiskip", depth=3, width=8, feat_dim=6, use_layernorm=True)
        params = build_network(spec, 10, 4, make_rng(3))
        path = str(tmp_path / "net.npz")
        save_checkpoint(path, params)
        loaded, state = load_checkpoint(path)
        assert state is None
        for name, tensor in params.tensors().items():
            assert np.array_equal(loaded.tensors()[name], tensor)
        assert loaded.spec == spec

    def test_optimizer_state_roundtrip(self, tmp_path):
        from gradlab.networks import backward_network, forward_network
        from gradlab.optim import kron_step

        spec = ArchitectureSpec(depth=2, width=8, feat_dim=6, use_layernorm=True)
        params = build_network(spec, 10, 4, make_rng(3))
        state = make_optimizer_state("kron", learning_rate=1e-3)
        r = make_rng(1)
        for _ in range(3):
            res = forward_network(params, r.standard_normal((16, 10)))
            bundle = backward_network(params, res.caches, r.standard_normal((16, 4)))
            params = kron_step(params, bundle, res.caches, state)
        path = str(tmp_path / "full.npz")
        save_checkpoint(path, params, state)
        loaded_params, loaded_state = load_checkpoint(path)
        assert loaded_state.t == state.t
        for lid, fac in state.layers.items():
            assert np.array_equal(loaded_state.layers[lid].a_ema, fac.a_ema)
            assert np.array_equal(loaded_state.layers[lid].g_inv, fac.g_inv)
        assert np.array_equal(loaded_state.fallback.m["mlp.0.gain"], state.fallback.m["mlp.0.gain"])


class TestCli:
    def test_run_and_summarize_cli(self, tmp_path):
        from gradlab.cli import main

        cfg_text = """
[experiment]
task = supervised_stationary
seeds = 0
budget = 2
[architecture]
depth = 1
width = 16
feat_dim = 8
[task]
class_count = 4
dim = 8
n_train = 128
n_test = 64
margin = 6.0
[probes]
hutchinson_samples = 2
probe_batch_size = 64
"""
        cfg_file = tmp_path / "exp.cfg"
        cfg_file.write_text(cfg_text)
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg_file), "--out", str(out)]) == 0
        assert main(["summarize", str(out)]) == 0

    def test_config_error_exit_code(self, tmp_path):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("[experiment]\ntask = nonsense\n")
        from gradlab.cli import main

        assert main(["run", "--config", str(cfg_file)]) == 1

    def test_probe_cli(self, tmp_path):
        from gradlab.cli import main

        spec = ArchitectureSpec(depth=1, width=16, feat_dim=8)
        params = build_network(spec, 8, 4, make_rng(0))
        ckpt = tmp_path / "net.npz"
        save_checkpoint(str(ckpt), params)
        r = make_rng(1)
        batch = tmp_path / "batch.npz"
        np.savez(batch, inputs=r.standard_normal((32, 8)), labels=r.integers(0, 4, 32))
        assert main(["probe", "--checkpoint", str(ckpt), "--batch", str(batch), "--hutchinson", "2"]) == 0
