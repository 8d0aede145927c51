"""Task registry, episode generators, rewards and the stepping environment."""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import env
from .env import SHAPES, SpriteState

GOAL_RADIUS = 0.075
MAX_GOAL_DISTANCE = math.sqrt(2.0) / 2.0
CLUSTER_THRESHOLD = 2.5
SUCCESS_BONUS = 1.0
CENTER = (0.5, 0.5)

COLOR_HUES = {
    "red": (0.9, 1.0),
    "blue": (0.55, 0.65),
    "green": (0.27, 0.37),
    "purple": (0.73, 0.83),
    "yellow": (0.12, 0.22),
}
COLOR_GOALS = {
    "red": (0.75, 0.75),
    "blue": (0.75, 0.25),
    "green": (0.25, 0.75),
    "purple": (0.25, 0.25),
    "yellow": (0.5, 0.5),
}
SORTING_TEST_PAIR = ("red", "blue")
SORTING_TRAIN_PAIRS = [p for p in itertools.combinations(COLOR_HUES, 2)
                       if set(p) != set(SORTING_TEST_PAIR)]
CLUSTERING_PAIRS = {"train": ("blue", "green"), "robustness": ("purple", "yellow")}

SPLITS = ("train", "robustness")


def color_of(hue: float) -> Optional[str]:
    for name, (lo, hi) in COLOR_HUES.items():
        if lo <= hue <= hi:
            return name
    return None


@dataclass(frozen=True)
class TaskSpec:
    name: str
    max_episode_length: int
    reward_fn: str
    termination_rule: str
    split: str = "train"
    sparse: bool = False

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.sparse and self.reward_fn != "goal_finding":
            raise ValueError("the sparse variant only exists for goal-finding tasks")

    def with_split(self, split: str) -> "TaskSpec":
        return dataclasses.replace(self, split=split)


# -- generators -------------------------------------------------------------

def _sprite(rng, shape=None, hue=(0.0, 1.0), sat=(0.3, 1.0), pos=None) -> SpriteState:
    if shape is None:
        shape = SHAPES[rng.integers(len(SHAPES))]
    elif isinstance(shape, (tuple, list)):
        shape = shape[rng.integers(len(shape))]
    x, y = rng.uniform(0.0, 1.0, size=2) if pos is None else pos
    return SpriteState(x=float(x), y=float(y), shape=shape, hue=float(rng.uniform(*hue)),
                       saturation=float(rng.uniform(*sat)), value=1.0)


def _in_lower_right(x: float, y: float) -> bool:
    return x >= 0.5 and y >= 0.5


def _gen_exploration(rng, split):
    n = int(rng.integers(1, 7))
    return [_sprite(rng) for _ in range(n)]


def _gen_shape(rng, split):
    shape = "square" if split == "train" else ("circle", "triangle")
    return [_sprite(rng, shape=shape, hue=(0.0, 0.4))]


def _gen_position(rng, split):
    while True:
        x, y = rng.uniform(0.0, 1.0, size=2)
        if _in_lower_right(x, y) == (split == "robustness"):
            break
    target = _sprite(rng, hue=(0.0, 0.4), pos=(x, y))
    distractor = _sprite(rng, hue=(0.5, 0.9))
    return [target, distractor]


def _gen_counts(n_targets_train, n_distractors_train, n_targets_test, n_distractors_test):
    def gen(rng, split):
        if split == "train":
            nt, nd = n_targets_train, n_distractors_train
        else:
            nt, nd = n_targets_test, n_distractors_test
        targets = [_sprite(rng, shape="square", hue=(0.0, 0.5)) for _ in range(nt)]
        distractors = [_sprite(rng, shape=("circle", "triangle"), hue=(0.0, 0.5)) for _ in range(nd)]
        return targets + distractors
    return gen


def _colored(rng, color):
    return _sprite(rng, hue=COLOR_HUES[color])


def _gen_sorting(rng, split):
    if split == "train":
        pair = SORTING_TRAIN_PAIRS[rng.integers(len(SORTING_TRAIN_PAIRS))]
    else:
        pair = SORTING_TEST_PAIR
    return [_colored(rng, c) for c in pair]


def _gen_clustering(rng, split):
    a, b = CLUSTERING_PAIRS[split]
    return [_colored(rng, c) for c in (a, a, b, b)]


def _is_square(s: SpriteState) -> bool:
    return s.shape == "square"


def _all(s: SpriteState) -> bool:
    return True


def _hue_target(s: SpriteState) -> bool:
    return s.hue <= 0.4


_TASKS: dict[str, tuple[TaskSpec, Callable, Callable]] = {
    "exploration": (TaskSpec("exploration", 10, "none", "timeout"), _gen_exploration, _all),
    "goal_finding.shape": (TaskSpec("goal_finding.shape", 20, "goal_finding", "all_targets_at_goal"),
                           _gen_shape, _all),
    "goal_finding.position": (TaskSpec("goal_finding.position", 20, "goal_finding", "all_targets_at_goal"),
                              _gen_position, _hue_target),
    "goal_finding.targets": (TaskSpec("goal_finding.targets", 20, "goal_finding", "all_targets_at_goal"),
                             _gen_counts(1, 2, 2, 2), _is_square),
    "goal_finding.distractors": (TaskSpec("goal_finding.distractors", 20, "goal_finding", "all_targets_at_goal"),
                                 _gen_counts(2, 1, 2, 2), _is_square),
    "sorting": (TaskSpec("sorting", 50, "sorting", "all_at_color_goals"), _gen_sorting, _all),
    "clustering": (TaskSpec("clustering", 50, "clustering", "inverse_db_above_threshold"),
                   _gen_clustering, _all),
}

TASK_NAMES = tuple(_TASKS)
GOAL_FINDING_TASKS = tuple(n for n in TASK_NAMES if n.startswith("goal_finding"))


def get_task(name: str, split: str = "train", sparse: bool = False) -> TaskSpec:
    if name not in _TASKS:
        raise KeyError(f"unknown task {name!r}; choose from {', '.join(TASK_NAMES)}")
    return dataclasses.replace(_TASKS[name][0], split=split, sparse=sparse)


def generate_episode(task: TaskSpec, rng: np.random.Generator) -> list[SpriteState]:
    """Sample the initial sprites of one episode; z layers follow list order."""
    _, gen, _ = _TASKS[task.name]
    sprites = gen(rng, task.split)
    return [dataclasses.replace(s, z_layer=i) for i, s in enumerate(sprites)]


def targets_of(task: TaskSpec, sprites: Sequence[SpriteState]) -> list[int]:
    pred = _TASKS[task.name][2]
    return [i for i, s in enumerate(sprites) if pred(s)]


# -- rewards ----------------------------------------------------------------

def goal_reward(x: float, y: float, goal=CENTER) -> float:
    d = math.hypot(x - goal[0], y - goal[1])
    return float(min(1.0, max(0.0, 1.0 - d / MAX_GOAL_DISTANCE)))


def _at(s: SpriteState, goal) -> bool:
    return math.hypot(s.x - goal[0], s.y - goal[1]) <= GOAL_RADIUS


def reward(task: TaskSpec, sprites: Sequence[SpriteState]) -> tuple[float, bool]:
    """Reward of a state and whether it meets the task's success criterion."""
    if task.reward_fn == "none":
        return 0.0, False
    if task.reward_fn == "goal_finding":
        targets = [sprites[i] for i in targets_of(task, sprites)]
        success = bool(targets) and all(_at(s, CENTER) for s in targets)
        if task.sparse:
            return (1.0 if success else 0.0), success
        return float(sum(goal_reward(s.x, s.y) for s in targets)), success
    if task.reward_fn == "sorting":
        goals = [COLOR_GOALS[color_of(s.hue)] for s in sprites]
        r = sum(goal_reward(s.x, s.y, g) for s, g in zip(sprites, goals))
        success = all(_at(s, g) for s, g in zip(sprites, goals))
        return float(r + (SUCCESS_BONUS if success else 0.0)), success
    if task.reward_fn == "clustering":
        pts = np.array([[s.x, s.y] for s in sprites])
        labels = [color_of(s.hue) for s in sprites]
        db = env.davies_bouldin(pts, labels)
        inv = 0.0 if math.isinf(db) else 1.0 / max(db, 1e-9)
        success = inv > CLUSTER_THRESHOLD
        return float(inv + (SUCCESS_BONUS if success else 0.0)), success
    raise ValueError(f"unknown reward function {task.reward_fn!r}")


# -- environment ------------------------------------------------------------

@dataclass
class StepResult:
    sprites: list
    reward: float
    done: bool
    success: bool

    @property
    def image(self) -> np.ndarray:
        return env.render(self.sprites)


class SpriteEnv:
    """One independent episode runner. Holds its own rng; no shared state."""

    def __init__(self, task: TaskSpec, seed=None, noise: bool = True, max_episode_length=None):
        self.task = task
        self.rng = np.random.default_rng(seed)
        self.noise = noise
        self.max_episode_length = max_episode_length or task.max_episode_length
        self.sprites: list[SpriteState] = []
        self.t = 0

    def reset(self) -> StepResult:
        self.sprites = generate_episode(self.task, self.rng)
        self.t = 0
        r, success = reward(self.task, self.sprites)
        return StepResult(list(self.sprites), r, False, success)

    def step(self, action) -> StepResult:
        self.sprites = env.step(self.sprites, action, self.noise, self.rng)
        self.t += 1
        r, success = reward(self.task, self.sprites)
        done = success or self.t >= self.max_episode_length
        return StepResult(list(self.sprites), r, done, success)
