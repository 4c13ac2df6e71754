"""Command-line entry point: ``ctxwm <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import bounds, envs, harness, metrics, plotting, store
from .config import RunConfig, add_config_flags, config_from_args, dump_config
from .errors import ConfigError, CtxwmError, FormatError

log = logging.getLogger("ctxwm")

PRESETS = {
    # two opposite goals; the ID test tasks are the training directions
    "two-direction": {
        "family": "point-mass-direction",
        "train": [0.0, math.pi],
        "test_id": [0.0, math.pi],
        "test_ood": [0.5 * math.pi, -0.5 * math.pi],
    },
}


def _threads() -> None:
    torch.set_num_threads(envs.max_workers())


def _fmt_help(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=40)


# --- gen-data -------------------------------------------------------------------------


def preset_specs(name: str, seed: int, episode_length: int) -> dict[str, list[envs.TaskSpec]]:
    p = PRESETS[name]
    fam = envs.get_family(p["family"])
    rng = np.random.default_rng(seed)
    return {
        split: [envs.TaskSpec(p["family"], {fam.factor: v}, episode_length, int(rng.integers(2**31)))
                for v in p[split]]
        for split in ("train", "test_id", "test_ood")
    }


def cmd_gen_data(args: argparse.Namespace, cfg: RunConfig) -> int:
    d = cfg.data
    options = {"n_cells": args.n_cells} if args.n_cells is not None else {}
    if args.preset:
        specs = preset_specs(args.preset, args.seed, d.episode_length)
    else:
        specs = envs.sample_task_set(d.family, d.tasks, d.test_id_tasks, d.test_ood_tasks, args.seed,
                                     d.episode_length, options)
    datasets = envs.generate_datasets(specs["train"], d.mix, d.episodes, args.seed)
    out = store.save_datasets(args.out, datasets, {"test_id": specs["test_id"], "test_ood": specs["test_ood"]},
                              seed=args.seed, extra={"mix": d.mix, "preset": args.preset})
    log.info("wrote %d tasks (%d transitions) to %s", len(datasets), sum(map(len, datasets)), out)
    return 0


# --- train ----------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    datasets, _, _ = store.load_datasets(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    every = args.checkpoint_every

    def periodic(tr: harness.SpcTrainer) -> None:
        if every and tr.step % every == 0:
            tr.model.save(out / f"checkpoint_{tr.step:07d}.ckpt", {"seed": args.seed, "step": tr.step})

    trainer = harness.SpcTrainer(datasets, cfg.train, args.seed)
    trainer.fit(periodic)
    trainer.model.save(out / "model.ckpt", {"seed": args.seed, "step": trainer.step})
    store.write_csv(out / "wm_metrics.csv", harness.WM_HEADER, trainer.wm_rows)
    store.write_csv(out / "iql_metrics.csv", harness.IQL_HEADER, trainer.iql_rows)
    plotting.training_curves(harness.WM_HEADER, trainer.wm_rows, out / "wm_metrics.png", "world model + context")
    plotting.training_curves(harness.IQL_HEADER, trainer.iql_rows, out / "iql_metrics.png", "offline RL")
    log.info("trained %d iterations; artifacts in %s", trainer.step, out)
    return 0


# --- eval -----------------------------------------------------------------------------

SUMMARY_HEADER = ["task_id", "protocol", "k", "mean_return", "success_rate", "expert_return",
                  "random_return", "normalized_score"]


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    model = harness.SpcModel.load(args.checkpoint)
    datasets, tests, _ = store.load_datasets(args.data)
    specs = [d.spec for d in datasets] if args.split == "train" else tests.get(args.split, [])
    if not specs:
        raise ConfigError(f"no tasks in split {args.split!r}")
    e = cfg.eval
    rows, summary = [], []
    for task_id, spec in enumerate(specs):
        expert, rand = harness.reference_returns(spec, e.episodes, args.seed)
        runs = []
        if args.protocol in ("zero", "both"):
            runs.append(harness.zero_shot_eval(model, spec, e.episodes, args.seed, task_id))
        if args.protocol in ("few", "both"):
            runs.append(harness.few_shot_eval(model, spec, e.k, e.episodes, args.seed, task_id,
                                              e.adapt_deterministic))
        for res in runs:
            rows.extend(r.row() for r in res)
            mean = float(np.mean([r.ret for r in res]))
            summary.append([task_id, res[0].protocol, res[0].k, mean, float(np.mean([r.success for r in res])),
                            expert, rand, harness.normalized_score(mean, expert, rand)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store.write_csv(out / "results.csv", harness.RESULT_HEADER, rows)
    store.write_csv(out / "summary.csv", SUMMARY_HEADER, summary)
    plotting.eval_returns(rows, out / "results.png")
    return 0


# --- metrics --------------------------------------------------------------------------

METRIC_HEADER = ["source", "feature_rank", "matrix_rank", "dormant_ratio", "dci_disentanglement",
                 "dci_completeness", "dci_informativeness"]


def _read_matrix(path: Path) -> tuple[list[str], np.ndarray]:
    header, rows = store.read_csv(path)
    return header, np.asarray(rows, dtype=np.float64).reshape(-1, len(header))


def metrics_row(source: str, acts: np.ndarray, factors: np.ndarray, z: np.ndarray) -> list:
    d = metrics.dci(factors, z)
    return [source, metrics.feature_rank(acts), metrics.matrix_rank(acts), metrics.dormant_ratio(acts),
            d.disentanglement, d.completeness, d.informativeness]


def cmd_metrics(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.checkpoint:
        if not args.data:
            raise ConfigError("--data is required with --checkpoint")
        datasets, _, _ = store.load_datasets(args.data)
        for i, ckpt in enumerate(args.checkpoint):
            model = harness.SpcModel.load(ckpt)
            acts, factors, z, names = harness.representation_tables(
                model, datasets, args.contexts_per_task, cfg.train.context_size, args.seed)
            store.write_csv(out / f"activations_{i}.csv", [f"u{j}" for j in range(acts.shape[1])], acts)
            store.write_csv(out / f"factors_{i}.csv", names + [f"z{j}" for j in range(z.shape[1])],
                            np.concatenate([factors, z], axis=1))
            rows.append(metrics_row(str(ckpt), acts, factors, z))
    elif args.activations and args.factors:
        _, acts = _read_matrix(Path(args.activations))
        header, table = _read_matrix(Path(args.factors))
        zcols = [j for j, h in enumerate(header) if h.startswith("z")]
        fcols = [j for j in range(len(header)) if j not in zcols]
        if not zcols or not fcols:
            raise FormatError("factor table needs factor columns and z* columns")
        rows.append(metrics_row(str(args.activations), acts, table[:, fcols], table[:, zcols]))
    else:
        raise ConfigError("give --checkpoint (with --data) or --activations and --factors")
    store.write_csv(out / "metrics.csv", METRIC_HEADER, rows)
    return 0


# --- bound-check ----------------------------------------------------------------------


def cmd_bound_check(args: argparse.Namespace, cfg: RunConfig) -> int:
    rows = bounds.fuzz_rows(args.instances, args.seed, args.max_states, args.max_actions, args.max_codes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store.write_csv(out / "certificates.csv", bounds.CERT_HEADER, rows)
    if rows:
        plotting.bound_scatter([r[-3] for r in rows], [r[-2] for r in rows], out / "certificates.png")
    failed = [r[0] for r in rows if not r[-1]]
    if failed:
        log.error("bound violated on %d instances, first %s", len(failed), failed[:5])
        return 1
    log.info("%d instances certified", len(rows))
    return 0


# --- timing ---------------------------------------------------------------------------

TIMING_HEADER = ["component", "steps", "seconds", "steps_per_second"]


def cmd_timing(args: argparse.Namespace, cfg: RunConfig) -> int:
    datasets, _, _ = store.load_datasets(args.data)
    rows = harness.measure_timing(datasets, cfg.train, args.train_steps, args.test_steps, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store.write_csv(out / "timing.csv", TIMING_HEADER, rows)
    plotting.timing_bars(rows, out / "timing.png")
    return 0


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxwm", description="Contextual latent world models for offline meta-RL.",
                                formatter_class=_fmt_help)
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_fmt_help)
        sp.add_argument("--seed", type=int, default=0, help="single source of all randomness")
        sp.add_argument("--config", default=None, help="INI config file; flags override it")
        return sp

    g = command("gen-data", "generate offline datasets for a task family")
    g.add_argument("--out", default="data", help="output directory")
    g.add_argument("--preset", choices=sorted(PRESETS), default=None, help="fixed task set instead of sampling")
    g.add_argument("--n-cells", type=int, default=None, help="chain length for chain-gridworld-slip (default 7)")
    add_config_flags(g, ("data",), plain=True)
    g.set_defaults(func=cmd_gen_data)

    t = command("train", "meta-train world model, context encoder and policy")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", default="run", help="output directory")
    t.add_argument("--checkpoint-every", type=int, default=0, help="periodic checkpoint interval, 0 = off")
    add_config_flags(t, ("world_model", "context", "offline_rl", "train"))
    t.set_defaults(func=cmd_train)

    e = command("eval", "zero-shot and few-shot evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory holding the test task specs")
    e.add_argument("--split", choices=["test_id", "test_ood", "train"], default="test_id")
    e.add_argument("--protocol", choices=["zero", "few", "both"], default="both")
    e.add_argument("--out", default="eval")
    add_config_flags(e, ("eval",))
    e.set_defaults(func=cmd_eval)

    m = command("metrics", "representation metrics from checkpoints or activation/factor CSVs")
    m.add_argument("--checkpoint", nargs="*", default=None)
    m.add_argument("--data", default=None)
    m.add_argument("--activations", default=None)
    m.add_argument("--factors", default=None)
    m.add_argument("--contexts-per-task", type=int, default=10)
    m.add_argument("--out", default="metrics")
    add_config_flags(m, ("context",))
    m.set_defaults(func=cmd_metrics)

    b = command("bound-check", "certify value-error bounds on random tabular problems")
    b.add_argument("--instances", type=int, default=1000)
    b.add_argument("--max-states", type=int, default=8)
    b.add_argument("--max-actions", type=int, default=3)
    b.add_argument("--max-codes", type=int, default=5)
    b.add_argument("--out", default="bounds")
    b.set_defaults(func=cmd_bound_check)

    tm = command("timing", "training and test-time throughput")
    tm.add_argument("--data", required=True)
    tm.add_argument("--train-steps", type=int, default=50)
    tm.add_argument("--test-steps", type=int, default=200)
    tm.add_argument("--out", default="timing")
    add_config_flags(tm, ("world_model", "context", "offline_rl", "train"))
    tm.set_defaults(func=cmd_timing)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        cfg = config_from_args(args)
        return args.func(args, cfg)
    except (CtxwmError, OSError, NotImplementedError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
