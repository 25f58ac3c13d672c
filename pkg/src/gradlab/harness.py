"""Experiment harness: config files, seeded runs, sweeps, logs, summaries.

Metrics go to one CSV per run (header row first, fixed column set) and
events/errors to a sibling JSONL (run_start carries the schema hash and a
full config echo). Reruns with the same config and seed are bit-identical
up to the wall_ms column and JSONL timestamps.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .agents import PpoConfig, PqnConfig, train_ppo, train_pqn
from .checkpoint import save_checkpoint
from .diagnostics import ProbeConfig
from .envs import CartPoleSpec, CartPoleVecEnv, GridWorldSpec, GridWorldVecEnv
from .errors import ConfigError, GradlabError, InputError, NumericError, StateError
from .networks import ArchitectureSpec, DEPTH_CLASSES, WIDTH_CLASSES
from .rng import child_rng
from .supervised import (
    ShuffleSchedule,
    SupervisedConfig,
    load_cifar10_binary,
    make_synthetic_task,
    train_supervised,
)

__all__ = [
    "TASKS",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "run_experiment",
    "run_sweep",
    "summarize",
    "bootstrap_ci",
    "read_csv_rows",
]

TASKS = (
    "supervised_stationary",
    "supervised_shuffle",
    "pqn_gridworld",
    "pqn_cartpole",
    "ppo_gridworld",
    "ppo_cartpole",
)

_DEF_BUDGET = {
    "supervised_stationary": 100,
    "supervised_shuffle": 100,
    "pqn_gridworld": 300_000,
    "pqn_cartpole": 500_000,
    "ppo_gridworld": 300_000,
    "ppo_cartpole": 500_000,
}
_DEF_OPTIMIZER = {
    "supervised_stationary": "adam",
    "supervised_shuffle": "adam",
    "pqn_gridworld": "radam",
    "pqn_cartpole": "radam",
    "ppo_gridworld": "adam",
    "ppo_cartpole": "adam",
}


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _parse_int_list(text: str) -> list:
    return [int(tok.strip()) for tok in text.split(",") if tok.strip()]


def _parse_depth_width(text: str):
    return text if text in DEPTH_CLASSES or text in WIDTH_CLASSES else int(text)


# section -> key -> value parser
_SCHEMA = {
    "experiment": {
        "task": str,
        "seeds": _parse_int_list,
        "budget": int,
        "probe_every": int,
        "out_dir": str,
        "eval_episodes": int,
    },
    "architecture": {
        "topology": str,
        "depth": _parse_depth_width,
        "width": _parse_depth_width,
        "use_layernorm": _parse_bool,
        "activation": str,
        "encoder": str,
        "feat_dim": int,
    },
    "optimizer": {
        "kind": str,
        "learning_rate": float,
        "momentum": float,
        "beta1": float,
        "beta2": float,
        "eps": float,
        "ema_decay": float,
        "damping": float,
        "refresh_every": int,
        "update_cap": float,
    },
    "task": {
        "class_count": int,
        "dim": int,
        "n_train": int,
        "n_test": int,
        "margin": float,
        "dataset_seed": int,
        "batch_size": int,
        "shuffle_period": int,
        "shuffle_seed": int,
        "cifar_train": str,
        "cifar_test": str,
        "grid_size": int,
        "observation": str,
        "n_envs": int,
        "n_steps": int,
        "minibatches": int,
        "update_epochs": int,
        "gamma": float,
        "q_lambda": float,
        "eps_start": float,
        "eps_end": float,
        "exploration_fraction": float,
        "max_grad_norm": float,
        "gae_lambda": float,
        "clip_coef": float,
        "vf_coef": float,
        "ent_coef": float,
        "normalize_advantages": _parse_bool,
        "clip_value_loss": _parse_bool,
    },
    "probes": {
        "dormant_threshold": float,
        "srank_delta": float,
        "hutchinson_samples": int,
        "fd_epsilon": float,
        "probe_batch_size": int,
    },
}


@dataclass
class ExperimentConfig:
    task: str
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    budget: int = 0  # epochs (supervised) or env frames (RL); 0 = task default
    probe_every: int = 0  # 0 = task default (1 for supervised, 10 for RL)
    out_dir: str = "runs"
    eval_episodes: int = 0  # 0 = task default
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    arch_ln_explicit: bool = False
    optimizer: str = ""  # empty = task default
    learning_rate: float = 2.5e-4
    optimizer_options: dict = field(default_factory=dict)
    task_options: dict = field(default_factory=dict)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task '{self.task}', expected one of {TASKS}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.budget == 0:
            self.budget = _DEF_BUDGET[self.task]
        if self.budget <= 0:
            raise ConfigError("budget must be > 0")
        if not self.optimizer:
            self.optimizer = _DEF_OPTIMIZER[self.task]
        if self.probe_every == 0:
            self.probe_every = 1 if self.task.startswith("supervised") else 10
        if self.eval_episodes == 0:
            self.eval_episodes = 16 if self.task.endswith("cartpole") else 64
        if not self.arch_ln_explicit and self.task.startswith("pqn"):
            # PQN uses LayerNorm by default; an explicit [architecture] flag wins
            self.arch = replace(self.arch, use_layernorm=True)

    def run_id(self, seed: int) -> str:
        a = self.arch
        return f"{self.task}_{a.topology}_d{a.n_layers}_w{a.layer_width}_{self.optimizer}_s{seed}"

    def echo(self) -> dict:
        d = {
            "task": self.task,
            "seeds": list(self.seeds),
            "budget": self.budget,
            "probe_every": self.probe_every,
            "eval_episodes": self.eval_episodes,
            "arch": asdict(self.arch),
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "optimizer_options": dict(self.optimizer_options),
            "task_options": dict(self.task_options),
            "probes": asdict(self.probe),
        }
        return d


def parse_config(text: str) -> ExperimentConfig:
    """Parse sectioned key=value text; rejects unknown keys with line numbers."""
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SCHEMA:
                raise ConfigError(f"unknown section '[{current}]'", line=lineno)
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", line=lineno)
        if current is None:
            raise ConfigError("key outside any [section]", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA[current]:
            raise ConfigError(f"unknown key '{key}' in [{current}]", line=lineno)
        if key in sections[current]:
            raise ConfigError(f"duplicate key '{key}'", line=lineno)
        try:
            sections[current][key] = _SCHEMA[current][key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for '{key}': {exc}", line=lineno) from exc

    exp = sections.get("experiment", {})
    if "task" not in exp:
        raise ConfigError("missing required key 'task' in [experiment]")
    arch_kw = dict(sections.get("architecture", {}))
    ln_explicit = "use_layernorm" in arch_kw
    try:
        arch = ArchitectureSpec(**arch_kw)
    except ConfigError:
        raise
    opt = dict(sections.get("optimizer", {}))
    kind = opt.pop("kind", "")
    lr = opt.pop("learning_rate", 2.5e-4)
    probes = sections.get("probes", {})
    return ExperimentConfig(
        task=exp["task"],
        seeds=exp.get("seeds", [0, 1, 2]),
        budget=exp.get("budget", 0),
        probe_every=exp.get("probe_every", 0),
        out_dir=exp.get("out_dir", "runs"),
        eval_episodes=exp.get("eval_episodes", 0),
        arch=arch,
        arch_ln_explicit=ln_explicit,
        optimizer=kind,
        learning_rate=lr,
        optimizer_options=opt,
        task_options=dict(sections.get("task", {})),
        probe=ProbeConfig(**probes),
    )


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _schema_hash(columns: list) -> str:
    return hashlib.sha256(",".join(columns).encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class RunWriter:
    """Append-only CSV metrics + JSONL events for a single run."""

    def __init__(self, out_dir: str, run_id: str, seed: int, echo: dict):
        os.makedirs(out_dir, exist_ok=True)
        self.csv_path = os.path.join(out_dir, f"{run_id}.csv")
        self.jsonl_path = os.path.join(out_dir, f"{run_id}.jsonl")
        self.run_id = run_id
        self.seed = seed
        self.echo = echo
        self.columns: list | None = None
        self.t0 = time.monotonic()
        self._csv = open(self.csv_path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._csv)
        self._jsonl = open(self.jsonl_path, "w", encoding="utf-8")

    def event(self, kind: str, **payload):
        record = {"event": kind, "run_id": self.run_id, "ts": time.time()}
        record.update(payload)
        self._jsonl.write(json.dumps(record, sort_keys=True) + "\n")
        self._jsonl.flush()

    def start(self, config_echo: dict):
        self.event("run_start", seed=self.seed, config=config_echo)

    def write_row(self, row: dict):
        full = {"run_id": self.run_id, "seed": self.seed, "step": row["step"],
                "wall_ms": (time.monotonic() - self.t0) * 1000.0}
        full.update(self.echo)
        full.update({k: v for k, v in row.items() if k != "step"})
        if self.columns is None:
            self.columns = list(full.keys())
            self._writer.writerow(self.columns)
            self.event("schema", columns=self.columns, schema_hash=_schema_hash(self.columns))
        if list(full.keys()) != self.columns:
            raise StateError("metric row does not match the run's fixed column set")
        self._writer.writerow([_fmt(full[c]) for c in self.columns])
        self._csv.flush()

    def end(self, status: str, final: dict | None = None, error: str | None = None, layer_names=None):
        self.event("run_end", status=status, final=final, error=error, layer_names=layer_names)
        self._csv.close()
        self._jsonl.close()


def _grid_factory(task_options: dict, observation: str):
    size = task_options.get("grid_size", 12)

    def factory(rngs, n_envs):
        return GridWorldVecEnv(GridWorldSpec(size=size, observation=observation), n_envs, seed=rngs)

    return factory


def _cartpole_factory():
    def factory(rngs, n_envs):
        return CartPoleVecEnv(CartPoleSpec(), n_envs, seed=rngs)

    return factory


def _build_supervised_data(config: ExperimentConfig):
    opts = config.task_options
    if "cifar_train" in opts:
        train = load_cifar10_binary(opts["cifar_train"], split="train")
        test = load_cifar10_binary(opts["cifar_test"], split="test") if "cifar_test" in opts else None
        return train, test
    rng = child_rng(opts.get("dataset_seed", 0), 9000)
    return make_synthetic_task(
        opts.get("class_count", 10),
        opts.get("dim", 32),
        opts.get("n_train", 2048),
        opts.get("n_test", 512),
        opts.get("margin", 4.0),
        rng,
    )


def _run_single(config: ExperimentConfig, seed: int, writer: RunWriter):
    opts = config.task_options
    if config.task.startswith("supervised"):
        train, test = _build_supervised_data(config)
        schedule = None
        if config.task == "supervised_shuffle":
            schedule = ShuffleSchedule(
                period_epochs=opts.get("shuffle_period", 20), seed=opts.get("shuffle_seed", 7)
            )
        scfg = SupervisedConfig(
            batch_size=opts.get("batch_size", 256),
            epochs=config.budget,
            learning_rate=config.learning_rate,
            optimizer=config.optimizer,
            arch=config.arch,
            optimizer_options=config.optimizer_options,
        )
        result = train_supervised(
            scfg,
            train,
            schedule,
            test_dataset=test,
            probe_config=config.probe,
            probe_every=config.probe_every,
            seed=seed,
            on_row=writer.write_row,
        )
        final = {"final_accuracy": result.final_accuracy, "final_test_accuracy": result.final_test_accuracy}
        return result.params, result.optimizer_state, final

    observation = "image" if config.arch.encoder == "small_conv" else "onehot"
    if config.task.endswith("gridworld"):
        factory = _grid_factory(opts, observation)
    else:
        factory = _cartpole_factory()
    common = dict(
        learning_rate=config.learning_rate,
        optimizer=config.optimizer,
        optimizer_options=config.optimizer_options,
    )
    if config.task.startswith("pqn"):
        rcfg = PqnConfig(
            n_envs=opts.get("n_envs", 32),
            n_steps=opts.get("n_steps", 32),
            gamma=opts.get("gamma", 0.99),
            minibatches=opts.get("minibatches", 8),
            update_epochs=opts.get("update_epochs", 2),
            max_grad_norm=opts.get("max_grad_norm", 10.0),
            eps_start=opts.get("eps_start", 1.0),
            eps_end=opts.get("eps_end", 0.005),
            exploration_fraction=opts.get("exploration_fraction", 0.10),
            q_lambda=opts.get("q_lambda", 0.65),
            use_layernorm=config.arch.use_layernorm,
            **common,
        )
        result = train_pqn(
            rcfg,
            config.arch,
            factory,
            config.budget,
            probe_config=config.probe,
            probe_every=config.probe_every,
            eval_episodes=config.eval_episodes,
            seed=seed,
            on_row=writer.write_row,
        )
    else:
        rcfg = PpoConfig(
            n_envs=opts.get("n_envs", 8),
            n_steps=opts.get("n_steps", 128),
            gamma=opts.get("gamma", 0.99),
            gae_lambda=opts.get("gae_lambda", 0.95),
            clip_coef=opts.get("clip_coef", 0.1),
            update_epochs=opts.get("update_epochs", 4),
            minibatches=opts.get("minibatches", 4),
            vf_coef=opts.get("vf_coef", 0.5),
            ent_coef=opts.get("ent_coef", 0.01),
            max_grad_norm=opts.get("max_grad_norm", 0.5),
            normalize_advantages=opts.get("normalize_advantages", True),
            clip_value_loss=opts.get("clip_value_loss", True),
            use_layernorm=config.arch.use_layernorm,
            **common,
        )
        result = train_ppo(
            rcfg,
            config.arch,
            factory,
            config.budget,
            probe_config=config.probe,
            probe_every=config.probe_every,
            eval_episodes=config.eval_episodes,
            seed=seed,
            on_row=writer.write_row,
        )
    final = {"final_eval_return": result.final_eval_return, "frames": result.frames}
    return result.params, result.optimizer_state, final


def run_experiment(config: ExperimentConfig, out_dir: str | None = None, seeds=None) -> dict:
    """One run per seed; numeric failures are recorded and sibling seeds continue."""
    out = out_dir or config.out_dir
    os.makedirs(out, exist_ok=True)
    a = config.arch
    echo = {
        "task": config.task,
        "topology": a.topology,
        "depth": a.n_layers,
        "width": a.layer_width,
        "optimizer": config.optimizer,
    }
    runs = []
    for seed in seeds if seeds is not None else config.seeds:
        run_id = config.run_id(seed)
        writer = RunWriter(out, run_id, seed, echo)
        writer.start(config.echo())
        try:
            params, opt_state, final = _run_single(config, seed, writer)
        except (NumericError, FloatingPointError) as exc:
            writer.end("failed", error=str(exc))
            runs.append({"run_id": run_id, "seed": seed, "status": "failed", "error": str(exc)})
            continue
        save_checkpoint(os.path.join(out, f"{run_id}.ckpt.npz"), params, opt_state)
        writer.end("ok", final=final, layer_names=params.tensor_names())
        runs.append({"run_id": run_id, "seed": seed, "status": "ok", **final})
    return {"out_dir": out, "runs": runs, "n_failed": sum(r["status"] == "failed" for r in runs)}


def bootstrap_ci(values, alpha: float = 0.95, n_boot: int = 2000, seed: int = 0):
    """Percentile bootstrap CI of the mean.

    Exhaustively enumerates all n^n resamples when that is small (<= 4096),
    which makes the interval exact and rng-free; falls back to seeded
    Monte Carlo otherwise.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n == 0:
        raise InputError("bootstrap_ci needs at least one value")
    if n == 1:
        return float(values[0]), float(values[0])
    if n**n <= 4096:
        idx = np.array(list(itertools.product(range(n), repeat=n)))
        means = values[idx].mean(axis=1)
    else:
        rng = child_rng(seed, 8100)
        means = values[rng.integers(0, n, size=(n_boot, n))].mean(axis=1)
    lo = (1.0 - alpha) / 2.0 * 100.0
    return float(np.percentile(means, lo)), float(np.percentile(means, 100.0 - lo))


def read_csv_rows(path: str) -> list:
    """Rows as dicts with numeric fields parsed."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                try:
                    parsed[k] = int(v)
                except ValueError:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
    return out


def _group_key(row: dict) -> str:
    return f"{row['task']}_{row['topology']}_d{row['depth']}_w{row['width']}_{row['optimizer']}"


def summarize(log_dir: str) -> dict:
    """Per-run finals, grad-norm medians, recovery phases, per-group curves with CIs."""
    csv_paths = sorted(
        os.path.join(log_dir, f) for f in os.listdir(log_dir) if f.endswith(".csv")
    ) if os.path.isdir(log_dir) else []
    if not csv_paths:
        raise InputError(f"no run logs found in '{log_dir}'")
    runs = {}
    for path in csv_paths:
        rows = read_csv_rows(path)
        if not rows:
            continue
        run_id = rows[0]["run_id"]
        grad_cols = sorted(
            (c for c in rows[0] if c.startswith("grad_norm_L")), key=lambda c: int(c.split("L")[1])
        )
        curve_metric = "accuracy" if "accuracy" in rows[0] else "eval_return"
        entry = {
            "run_id": run_id,
            "seed": rows[0]["seed"],
            "group": _group_key(rows[0]),
            "task": rows[0]["task"],
            "steps": [r["step"] for r in rows],
            "curve_metric": curve_metric,
            "curve": [float(r[curve_metric]) for r in rows],
            "final": {k: rows[-1][k] for k in rows[-1] if k not in ("run_id",)},
            "grad_norm_medians": [float(np.median([r[c] for r in rows])) for c in grad_cols],
        }
        if "shuffle_event" in rows[0]:
            entry["recovery"] = _recovery_phases(rows)
        runs[run_id] = entry

    groups = {}
    for entry in runs.values():
        groups.setdefault(entry["group"], []).append(entry)
    group_summaries = {}
    for gid, members in groups.items():
        steps = members[0]["steps"]
        if any(m["steps"] != steps for m in members):
            continue  # incomparable probe grids; per-run data remains available
        curves = np.array([m["curve"] for m in members])
        lo, hi = [], []
        for j in range(curves.shape[1]):
            l, h = bootstrap_ci(curves[:, j])
            lo.append(l)
            hi.append(h)
        finals = [m["curve"][-1] for m in members]
        flo, fhi = bootstrap_ci(finals)
        group_summaries[gid] = {
            "metric": members[0]["curve_metric"],
            "n_runs": len(members),
            "steps": steps,
            "mean": curves.mean(axis=0).tolist(),
            "ci_lo": lo,
            "ci_hi": hi,
            "final_mean": float(np.mean(finals)),
            "final_ci": [flo, fhi],
        }
    return {"runs": runs, "groups": group_summaries}


def _recovery_phases(rows: list) -> list:
    """Per shuffle phase: min and max accuracy (phase = between shuffle events)."""
    phases = []
    current = []
    for r in rows:
        if r.get("shuffle_event") and current:
            phases.append(current)
            current = []
        current.append(float(r["accuracy"]))
    if current:
        phases.append(current)
    return [{"min_accuracy": min(p), "max_accuracy": max(p), "mean_accuracy": float(np.mean(p))} for p in phases]


def run_sweep(
    base: ExperimentConfig,
    depths: list,
    widths: list,
    topologies: list | None = None,
    optimizers: list | None = None,
    out_dir: str | None = None,
) -> dict:
    """Cross-product of runs; per-cell final-metric mean with 95% bootstrap CI."""
    if not depths or not widths:
        raise ConfigError("sweep axes must be non-empty")
    topologies = topologies or [base.arch.topology]
    optimizers = optimizers or [base.optimizer]
    out = out_dir or base.out_dir
    cells = {}
    for depth, width, topology, optimizer in itertools.product(depths, widths, topologies, optimizers):
        cell_cfg = replace(
            base,
            arch=replace(base.arch, depth=depth, width=width, topology=topology),
            optimizer=optimizer,
        )
        cell_id = f"{topology}_d{cell_cfg.arch.n_layers}_w{cell_cfg.arch.layer_width}_{optimizer}"
        cell_dir = os.path.join(out, cell_id)
        result = run_experiment(cell_cfg, out_dir=cell_dir)
        finals = []
        for run in result["runs"]:
            if run["status"] != "ok":
                continue
            finals.append(run.get("final_accuracy", run.get("final_eval_return", 0.0)))
        if finals:
            lo, hi = bootstrap_ci(finals)
            cells[cell_id] = {
                "mean": float(np.mean(finals)),
                "ci": [lo, hi],
                "n_ok": len(finals),
                "n_failed": result["n_failed"],
                "dir": cell_dir,
            }
        else:
            cells[cell_id] = {"mean": None, "ci": None, "n_ok": 0, "n_failed": result["n_failed"], "dir": cell_dir}
    summary = {"cells": cells, "out_dir": out}
    with open(os.path.join(out, "sweep_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
