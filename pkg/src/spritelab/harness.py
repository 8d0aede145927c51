"""Experiment orchestration: config, seeding, the two-phase pipeline and reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tasks
from .agent import AgentConfig, TaskAgent, evaluate, task_phase
from .explorer import ExploreConfig, exploration_phase, load_exploration

log = logging.getLogger(__name__)

SUCCESS_THRESHOLD = 0.9
WINDOW = 30


def build_id() -> str:
    """Content hash of the package sources, stamped on every metric row."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return "src-" + h.hexdigest()[:12]


# -- data efficiency -------------------------------------------------------------

def data_efficiency(curve: Sequence[tuple[int, bool]], threshold: float = SUCCESS_THRESHOLD,
                    window: int = WINDOW) -> Optional[int]:
    """Steps taken by the end of the first episode from which every later
    `window`-episode block keeps mean success >= threshold.

    `curve` holds (cumulative steps, success) per episode, in order. Returns
    None when no such episode exists, including curves shorter than a window.
    """
    n = len(curve)
    if n < window:
        return None
    success = np.array([float(s) for _, s in curve])
    sums = np.convolve(success, np.ones(window), mode="valid")  # sums[k] = window starting at k
    failing = np.flatnonzero(sums < threshold * window - 1e-9)
    start = 0 if len(failing) == 0 else int(failing[-1]) + 1
    if start > n - window:
        return None
    return int(curve[start][0])


# -- configuration -----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    tasks: list = field(default_factory=lambda: ["goal_finding.shape"])
    split: str = "train"
    sparse: bool = False
    episodes: int = 1000
    max_steps: Optional[int] = None
    eval_episodes: int = 100
    explore_from: Optional[str] = None
    figures: bool = True
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_flat(self) -> dict:
        """Nested sections become dotted keys, e.g. "agent.branching"."""
        flat = {}
        for key, value in self.to_dict().items():
            if isinstance(value, dict):
                flat.update({f"{key}.{k}": v for k, v in value.items()})
            else:
                flat[key] = value
        return flat

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Accepts nested sections, dotted keys, or a mix of both."""
        top, sections = {}, {"explore": {}, "agent": {}}
        for key, value in data.items():
            head, _, rest = key.partition(".")
            if rest and head in sections:
                sections[head][rest] = value
            elif key in sections:
                sections[key].update(value)
            else:
                top[key] = value
        known = {f.name for f in dataclasses.fields(cls)} - set(sections)
        unknown = set(top) - known
        for name, section_cls in (("explore", ExploreConfig), ("agent", AgentConfig)):
            fields = {f.name for f in dataclasses.fields(section_cls)}
            unknown |= {f"{name}.{k}" for k in set(sections[name]) - fields}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "tasks" in top:
            top["tasks"] = list(top["tasks"])
        return cls(explore=ExploreConfig(**sections["explore"]), agent=AgentConfig(**sections["agent"]), **top)

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def validate(self):
        for name in self.tasks:
            tasks.get_task(name, self.split, self.sparse)
        if self.explore.mode not in ("matching", "pixel"):
            raise ValueError(f"unknown exploration mode {self.explore.mode!r}")


# -- reports ---------------------------------------------------------------------

@dataclass
class TaskReport:
    task: str
    train_success: float
    robustness_success: float
    data_efficiency: Optional[int]
    episodes: int
    env_steps: int
    curve: list


@dataclass
class EvalReport:
    seed: int
    build: str
    tasks: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "build": self.build,
                "tasks": {k: dataclasses.asdict(v) for k, v in self.tasks.items()}}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def make_agent(config: ExperimentConfig, t_model, d_net, task_index: int = 0) -> TaskAgent:
    rng = np.random.default_rng([config.seed, 10, task_index])
    return TaskAgent(t_model, d_net, config.agent, rng=rng)


def run_task(config: ExperimentConfig, task_name: str, t_model, d_net, out_dir, build: str,
             task_index: int = 0, progress=None, explore_from=None) -> tuple[TaskAgent, TaskReport]:
    task = tasks.get_task(task_name, config.split, config.sparse)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # each task directory records how to rebuild its agent
    dataclasses.replace(config, tasks=[task_name], out_dir=str(out),
                        explore_from=str(explore_from or config.explore_from)).save(out / "config.json")
    agent = make_agent(config, t_model, d_net, task_index)
    result = task_phase(agent, task, episodes=config.episodes, seed=config.seed, out_dir=out_dir, build=build,
                        max_steps=config.max_steps, progress=progress)
    train = evaluate(agent, task.with_split("train"), config.eval_episodes, seed=config.seed)
    robust = evaluate(agent, task.with_split("robustness"), config.eval_episodes, seed=config.seed)
    report = TaskReport(task_name, train, robust, data_efficiency(result.curve), len(result.episodes),
                        result.episodes[-1]["cumulative_steps"] if result.episodes else 0,
                        [list(c) for c in result.curve])
    return agent, report


def run_pipeline(config: ExperimentConfig, progress=None) -> EvalReport:
    """Exploration (or a reused checkpoint), then one task phase per task, then evaluation."""
    config.validate()
    build = build_id()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    if config.explore_from is not None:
        t_model, d_net, _ = load_exploration(config.explore_from)
    else:
        explore_cfg = dataclasses.replace(config.explore, seed=config.seed)
        res = exploration_phase(explore_cfg, out_dir=out / "exploration", build=build, progress=progress)
        t_model, d_net = res.t_model, res.d_net
    explore_dir = config.explore_from or str(out / "exploration")
    report = EvalReport(config.seed, build)
    for i, name in enumerate(config.tasks):
        _, task_report = run_task(config, name, t_model, d_net, out / "tasks" / name, build, task_index=i,
                                  explore_from=explore_dir)
        report.tasks[name] = task_report
    report.save(out / "report.json")
    if config.figures:
        try:
            from . import plotting
            plotting.render_report(out)
        except ImportError:  # matplotlib is optional at runtime
            log.warning("matplotlib unavailable; skipping figures")
    return report
