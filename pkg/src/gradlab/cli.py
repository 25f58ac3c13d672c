"""Command line entry point.

Exit codes: 0 success, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import ConfigError, GradlabError
from .harness import load_config, run_experiment, run_sweep, summarize


def _split_axis(text: str | None) -> list | None:
    if text is None:
        return None
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        out.append(int(tok) if tok.isdigit() else tok)
    return out


def _cmd_run(args) -> int:
    config = load_config(args.config)
    seeds = [args.seed] if args.seed is not None else None
    result = run_experiment(config, out_dir=args.out, seeds=seeds)
    for run in result["runs"]:
        status = run["status"]
        extra = run.get("error", "") if status == "failed" else json.dumps(
            {k: v for k, v in run.items() if k not in ("run_id", "seed", "status")}
        )
        print(f"{run['run_id']}: {status} {extra}")
    return 2 if result["n_failed"] else 0


def _cmd_sweep(args) -> int:
    config = load_config(args.config)
    summary = run_sweep(
        config,
        depths=_split_axis(args.depths),
        widths=_split_axis(args.widths),
        topologies=_split_axis(args.topologies),
        optimizers=_split_axis(args.optimizers),
        out_dir=args.out,
    )
    failed = 0
    for cell_id, cell in sorted(summary["cells"].items()):
        failed += cell["n_failed"]
        if cell["mean"] is None:
            print(f"{cell_id}: all runs failed")
        else:
            lo, hi = cell["ci"]
            print(f"{cell_id}: {cell['mean']:.4f} [{lo:.4f}, {hi:.4f}] ({cell['n_ok']} runs)")
    return 2 if failed else 0


def _cmd_summarize(args) -> int:
    summary = summarize(args.log_dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_probe(args) -> int:
    from .checkpoint import load_checkpoint
    from .diagnostics import ProbeBatch, ProbeConfig, run_probes
    from .networks import backward_network, forward_network
    from .rng import make_rng
    from .supervised import cross_entropy_with_softmax

    params, _ = load_checkpoint(args.checkpoint)
    with np.load(args.batch) as data:
        batch = {k: data[k] for k in data.files}
    if "inputs" in batch and "labels" in batch:
        probe = ProbeBatch(inputs=batch["inputs"], labels=batch["labels"])

        def loss_fn(p):
            res = forward_network(p, probe.inputs)
            loss, dlogits = cross_entropy_with_softmax(res.outputs, probe.labels)
            return loss, backward_network(p, res.caches, dlogits)

    elif {"obs", "actions", "rewards", "dones", "next_obs"} <= set(batch):
        probe = ProbeBatch(inputs=batch["obs"])
        gamma = float(batch.get("gamma", 0.99))

        def loss_fn(p):
            res_next = forward_network(p, batch["next_obs"])
            targets = batch["rewards"] + gamma * (1.0 - batch["dones"]) * res_next.outputs.max(axis=1)
            res = forward_network(p, batch["obs"])
            b = len(targets)
            actions = batch["actions"].astype(np.int64)
            diff = res.outputs[np.arange(b), actions] - targets
            d_out = np.zeros_like(res.outputs)
            d_out[np.arange(b), actions] = diff / b
            return 0.5 * float(np.mean(diff**2)), backward_network(p, res.caches, d_out)

    else:
        raise ConfigError(
            "probe batch must contain (inputs, labels) or (obs, actions, rewards, dones, next_obs)"
        )
    report = run_probes(params, probe, loss_fn, ProbeConfig(hutchinson_samples=args.hutchinson), make_rng(args.seed))
    print(json.dumps(report.__dict__, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradlab", description="gradient-stabilization lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None, help="run one seed only")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="depth x width x topology x optimizer sweep")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--depths", required=True)
    p_sweep.add_argument("--widths", required=True)
    p_sweep.add_argument("--topologies", default=None)
    p_sweep.add_argument("--optimizers", default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_sum = sub.add_parser("summarize", help="summarize a directory of run logs")
    p_sum.add_argument("log_dir")
    p_sum.set_defaults(func=_cmd_summarize)

    p_probe = sub.add_parser("probe", help="run diagnostics on a checkpoint")
    p_probe.add_argument("--checkpoint", required=True)
    p_probe.add_argument("--batch", required=True)
    p_probe.add_argument("--hutchinson", type=int, default=20)
    p_probe.add_argument("--seed", type=int, default=0)
    p_probe.set_defaults(func=_cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (GradlabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
