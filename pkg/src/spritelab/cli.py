"""Command line entry point: explore, task, eval, render, pipeline.

Metric rows stream to stdout as CSV; reports are printed as JSON.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import export, harness, tasks
from .agent import AgentConfig, TaskAgent, load_scorer, oracle_scorer, run_episode, evaluate, episode_seed
from .explorer import exploration_phase, load_exploration


class _CsvStream:
    """Writes dict rows to stdout as CSV, header first."""

    def __init__(self, stream=None):
        self.stream = stream or sys.stdout
        self.writer = None

    def __call__(self, row: dict):
        if self.writer is None:
            self.writer = csv.DictWriter(self.stream, fieldnames=list(row), lineterminator="\n")
            self.writer.writeheader()
        self.writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
        self.stream.flush()


def _load_config(path) -> harness.ExperimentConfig:
    return harness.ExperimentConfig.load(path) if path else harness.ExperimentConfig()


def _agent_overrides(cfg: AgentConfig, args) -> AgentConfig:
    changes = {}
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "ablate_uniform_sampler", False):
        changes["ablate_uniform_sampler"] = True
    return dataclasses.replace(cfg, **changes)


def cmd_explore(args) -> int:
    config = _load_config(args.config)
    explore = config.explore
    changes = {"seed": args.seed if args.seed is not None else config.seed}
    for key in ("steps", "mode", "actors", "log_every", "checkpoint_every"):
        value = getattr(args, key)
        if value is not None:
            changes[key] = value
    explore = dataclasses.replace(explore, **changes)
    exploration_phase(explore, out_dir=args.out, build=harness.build_id(),
                      progress=None if args.quiet else _CsvStream())
    if args.figures:
        from . import plotting
        plotting.render_report(args.out)
    return 0


def _task_config(args) -> harness.ExperimentConfig:
    config = _load_config(args.config)
    changes = {"tasks": [args.task], "split": args.split, "sparse": args.sparse,
               "agent": _agent_overrides(config.agent, args)}
    for key in ("seed", "episodes", "max_steps", "eval_episodes"):
        value = getattr(args, key)
        if value is not None:
            changes[key] = value
    return dataclasses.replace(config, **changes)


def cmd_task(args) -> int:
    config = _task_config(args)
    config = dataclasses.replace(config, explore_from=args.from_dir, out_dir=args.out)
    config.validate()
    t_model, d_net, _ = load_exploration(args.from_dir)
    out = Path(args.out)
    _, report = harness.run_task(config, args.task, t_model, d_net, out, harness.build_id(),
                                 progress=None if args.quiet else _CsvStream())
    summary = dataclasses.asdict(report)
    summary.pop("curve")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _restore_agent(task_dir, explore_dir=None, seed: int = 0) -> tuple[TaskAgent, harness.ExperimentConfig]:
    task_dir = Path(task_dir)
    config = harness.ExperimentConfig.load(task_dir / "config.json")
    explore_dir = explore_dir or config.explore_from
    if explore_dir is None:
        raise FileNotFoundError("no exploration checkpoint recorded; pass --explore")
    t_model, d_net, _ = load_exploration(explore_dir)
    scorer, _ = load_scorer(task_dir)
    agent = TaskAgent(t_model, d_net, config.agent, rng=np.random.default_rng([seed, 20]), scorer=scorer)
    return agent, config


def cmd_eval(args) -> int:
    agent, config = _restore_agent(args.from_dir, args.explore, args.seed)
    name = args.task or config.tasks[0]
    rows = {}
    for split in ([args.split] if args.split else list(tasks.SPLITS)):
        task = tasks.get_task(name, split, config.sparse)
        rows[split] = evaluate(agent, task, args.episodes, seed=args.seed)
    print(json.dumps({"task": name, "seed": args.seed, "build": harness.build_id(),
                      "episodes": args.episodes, "success": rows}, sort_keys=True))
    return 0


def cmd_render(args) -> int:
    if args.scorer:
        agent, config = _restore_agent(args.scorer, args.from_dir, args.seed)
        task = tasks.get_task(args.task or config.tasks[0], args.split, config.sparse)
    else:
        t_model, d_net, _ = load_exploration(args.from_dir)
        task = tasks.get_task(args.task or "goal_finding.shape", args.split)
        agent = TaskAgent(t_model, d_net, AgentConfig(), rng=np.random.default_rng([args.seed, 20]))
        agent.score_fn = oracle_scorer(task)
    result = run_episode(agent, task, episode_seed(args.seed, 0, stream=2), 0.0, train=False, trajectory=True)
    paths = export.export_episode(result["trajectory"], args.out)
    print(json.dumps({"task": task.name, "split": task.split, "steps": result["steps"],
                      "success": result["success"], "gif": str(paths["gif"]),
                      "frames": len(paths["png"])}, sort_keys=True))
    return 0


def cmd_pipeline(args) -> int:
    config = _load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.from_dir is not None:
        changes["explore_from"] = args.from_dir
    if args.task:
        changes["tasks"] = list(args.task)
    config = dataclasses.replace(config, **changes)
    report = harness.run_pipeline(config, progress=None if args.quiet else _CsvStream())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spritelab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("explore", help="train the transition model and action sampler")
    e.add_argument("--config")
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--mode", choices=("matching", "pixel"))
    e.add_argument("--actors", type=int)
    e.add_argument("--log-every", type=int)
    e.add_argument("--checkpoint-every", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--figures", action="store_true", help="render matplotlib figures next to the metrics")
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_explore)

    t = sub.add_parser("task", help="train a task agent on top of an exploration checkpoint")
    t.add_argument("--config")
    t.add_argument("--task", required=True, choices=tasks.TASK_NAMES)
    t.add_argument("--split", default="train", choices=tasks.SPLITS)
    t.add_argument("--mode", choices=("reward", "value"))
    t.add_argument("--sparse", action="store_true")
    t.add_argument("--ablate-uniform-sampler", action="store_true")
    t.add_argument("--episodes", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--eval-episodes", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--from", dest="from_dir", required=True, help="exploration run directory")
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_task)

    v = sub.add_parser("eval", help="greedy success rate of a trained task agent")
    v.add_argument("--from", dest="from_dir", required=True, help="task run directory")
    v.add_argument("--explore", help="exploration directory (defaults to the one recorded by the task run)")
    v.add_argument("--task", choices=tasks.TASK_NAMES)
    v.add_argument("--split", choices=tasks.SPLITS)
    v.add_argument("--episodes", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="export one greedy episode as PNG frames, GIF and JSON lines")
    r.add_argument("--from", dest="from_dir", help="exploration run directory")
    r.add_argument("--scorer", help="task run directory; without it the true reward scores proposals")
    r.add_argument("--task", choices=tasks.TASK_NAMES)
    r.add_argument("--split", default="train", choices=tasks.SPLITS)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    pl = sub.add_parser("pipeline", help="exploration, task phases and evaluation in one go")
    pl.add_argument("--config")
    pl.add_argument("--seed", type=int)
    pl.add_argument("--out")
    pl.add_argument("--from", dest="from_dir", help="reuse this exploration checkpoint")
    pl.add_argument("--task", action="append", choices=tasks.TASK_NAMES)
    pl.add_argument("--quiet", action="store_true")
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "render" and not (args.from_dir or args.scorer):
        print("render needs --from or --scorer", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
