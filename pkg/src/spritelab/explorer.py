"""Curiosity-driven action sampler and the reward-free exploration phase.

The sampler deforms uniform draws u in [0, 1]^4 into actions. A small MLP
reads the flattened scene and u and outputs the mean and (softplus) scale of
a Gaussian deformation; the action is clip(u + deformation). It is trained
to seek actions whose predicted transition error is high, against an L1
penalty on the deformation, while the transition model is trained on the
collected transitions from a prioritized replay.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import env, tasks
from .autograd import MLP, Adam, as_tensor, concat, gaussian_sample, save_checkpoint
from .replay import PrioritizedReplay
from .transition import DEFAULT_MATCHING_SCALE, TransitionModel
from .vision import NUM_SLOTS, SLOT_DIM, encode_oracle

log = logging.getLogger(__name__)

ACTION_DIM = 4
DEFORMATION_PENALTY = 210.0
SCALE_FLOOR = 0.02
SCALE_FLOOR_PENALTY = 1e5


class DeformationNet:
    def __init__(self, rng: Optional[np.random.Generator] = None, dtype=np.float32, hidden=(64, 64)):
        self.net = MLP((NUM_SLOTS * SLOT_DIM + ACTION_DIM, *hidden, 2 * ACTION_DIM), rng, dtype=dtype,
                       name="d_net")

    def distribution(self, z, u, frozen: bool = False):
        """Mean and positive scale of the deformation for scenes z (B, K, M) and draws u (B, 4)."""
        z = as_tensor(z, self.net.dtype)
        u = as_tensor(u, self.net.dtype)
        out = self.net(concat([z.reshape(z.shape[0], -1), u], axis=-1), frozen=frozen)
        return out[:, :ACTION_DIM], out[:, ACTION_DIM:].softplus()

    def distribution_numpy(self, z: np.ndarray, u: np.ndarray):
        z = np.asarray(z, dtype=self.net.dtype)
        u = np.asarray(u, dtype=self.net.dtype)
        out = self.net.forward_numpy(np.concatenate([z.reshape(z.shape[0], -1), u], axis=-1))
        return out[:, :ACTION_DIM], np.logaddexp(0.0, out[:, ACTION_DIM:])


def sample_actions(d_net: DeformationNet, z: np.ndarray, n: int, rng: np.random.Generator):
    """n proposals for one scene z (K, M) -> (actions (n, 4), u (n, 4))."""
    u = rng.uniform(0.0, 1.0, size=(n, ACTION_DIM))
    mean, scale = d_net.distribution_numpy(np.broadcast_to(z, (n, *np.shape(z))), u)
    deform = mean + scale * rng.standard_normal((n, ACTION_DIM))
    return np.clip(u + deform, 0.0, 1.0).astype(np.float64), u


def sample_action(d_net: DeformationNet, z: np.ndarray, rng: np.random.Generator):
    a, u = sample_actions(d_net, z, 1, rng)
    return a[0], u[0]


def sample_uniform_actions(n: int, rng: np.random.Generator):
    u = rng.uniform(0.0, 1.0, size=(n, ACTION_DIM))
    return u.copy(), u


def explorer_loss(d_net: DeformationNet, t_model: TransitionModel, z, u, rng: np.random.Generator,
                  return_parts: bool = False):
    """Batch-mean of 210 |deformation|_1 - e_pred(z, a) + scale-floor penalty.

    e_pred is taken in pixel-loss units (`t_model.curiosity_scale`).

    The transition network enters as constants, so gradients reach the
    action (and from there the sampler) but never the transition weights.
    """
    z = np.asarray(z)
    u = np.asarray(u)
    mean, scale = d_net.distribution(z, u)
    deform = gaussian_sample(mean, scale, rng)
    action = (as_tensor(u, d_net.net.dtype) + deform).clip(0.0, 1.0)
    _, e_pred, _ = t_model.forward(z, action, frozen=True)
    reg = deform.abs().sum(axis=1) * DEFORMATION_PENALTY
    below = (scale.data < SCALE_FLOOR).astype(scale.data.dtype)
    penalty = (scale * below).sum(axis=1) * (-SCALE_FLOOR_PENALTY)
    loss = (reg - e_pred * t_model.curiosity_scale + penalty).mean()
    if return_parts:
        return loss, {"reg": float(reg.data.mean()), "e_pred": float(e_pred.data.mean()) * t_model.curiosity_scale,
                      "penalty": float(penalty.data.mean()), "scale": float(scale.data.mean())}
    return loss


class Explorer:
    def __init__(self, d_net: DeformationNet, lr: float = 3e-4):
        self.d_net = d_net
        self.optimizer = Adam(d_net.net.params(), lr=lr)

    def train_step(self, t_model: TransitionModel, z, rng: np.random.Generator) -> dict:
        u = rng.uniform(0.0, 1.0, size=(len(z), ACTION_DIM))
        loss, parts = explorer_loss(self.d_net, t_model, z, u, rng, return_parts=True)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"explorer loss is not finite: {loss.item()}")
        self.d_net.net.zero_grad()
        loss.backward()
        self.optimizer.step()
        parts["loss"] = loss.item()
        return parts


# -- diagnostics --------------------------------------------------------------

def hit_rate(d_net: Optional[DeformationNet], scenes, samples_per_scene: int, rng: np.random.Generator,
             shuffle: bool = True) -> float:
    """Fraction of sampled position clicks that land inside some sprite."""
    hits = total = 0
    for sprites in scenes:
        z = encode_oracle(sprites, shuffle=shuffle, rng=rng)
        if d_net is None:
            actions, _ = sample_uniform_actions(samples_per_scene, rng)
        else:
            actions, _ = sample_actions(d_net, z, samples_per_scene, rng)
        inside = np.zeros(len(actions), dtype=bool)
        for s in sprites:
            inside |= env.shape_contains(s.shape, actions[:, 0] - s.x, actions[:, 1] - s.y)
        hits += int(inside.sum())
        total += len(actions)
    return hits / max(total, 1)


def dump_deformation_grid(d_net: DeformationNet, z: np.ndarray, which: str = "position", resolution: int = 16,
                          rng: Optional[np.random.Generator] = None) -> list[dict]:
    """Deformation mean over a grid in one half of u; the other half is random.

    Returns source -> target point pairs in the chosen 2-d slice.
    """
    if which not in ("position", "motion"):
        raise ValueError("which must be 'position' or 'motion'")
    rng = rng if rng is not None else np.random.default_rng(0)
    g = (np.arange(resolution) + 0.5) / resolution
    gx, gy = np.meshgrid(g, g)
    n = resolution * resolution
    u = rng.uniform(0.0, 1.0, size=(n, ACTION_DIM))
    cols = slice(0, 2) if which == "position" else slice(2, 4)
    u[:, cols] = np.stack([gx.ravel(), gy.ravel()], axis=1)
    mean, _ = d_net.distribution_numpy(np.broadcast_to(z, (n, *np.shape(z))), u)
    target = np.clip(u + mean, 0.0, 1.0)
    return [{"source": [float(v) for v in u[i, cols]], "target": [float(v) for v in target[i, cols]]}
            for i in range(n)]


def attraction_fraction(grid: list[dict], sprites) -> float:
    """Share of grid points whose displacement points toward the nearest sprite."""
    if not sprites:
        return 0.0
    centres = np.array([[s.x, s.y] for s in sprites])
    good = 0
    for item in grid:
        src, dst = np.array(item["source"]), np.array(item["target"])
        nearest = centres[np.argmin(np.linalg.norm(centres - src, axis=1))]
        if np.dot(dst - src, nearest - src) > 0.0:
            good += 1
    return good / len(grid)


def mean_deformation(grid: list[dict]) -> float:
    return float(np.mean([np.linalg.norm(np.subtract(i["target"], i["source"])) for i in grid]))


# -- exploration phase ----------------------------------------------------------

@dataclass
class ExploreConfig:
    steps: int = 50_000
    seed: int = 0
    mode: str = "matching"
    batch_size: int = 16
    lr: float = 3e-4
    replay_capacity: int = 100_000
    alpha: float = 1.0
    beta: float = 1.0
    noise: bool = True
    shuffle_slots: bool = True
    actors: int = 1
    env_steps_per_update: int = 1
    sync_every: int = 50
    log_every: int = 500
    checkpoint_every: int = 10_000
    matching_scale: float = DEFAULT_MATCHING_SCALE
    hit_rate_scenes: int = 50
    hit_rate_samples: int = 100


@dataclass
class ExplorationResult:
    t_model: TransitionModel
    d_net: DeformationNet
    replay: PrioritizedReplay
    metrics: list = field(default_factory=list)


METRIC_FIELDS = ["step", "env_steps", "seed", "build", "loss", "loss_t", "loss_err", "loss_l1", "e_pred",
                 "explorer_loss", "explorer_reg", "explorer_e_pred", "explorer_scale", "actor_hit_rate",
                 "sampler_hit_rate", "replay_size", "priority_p10", "priority_p50", "priority_p90"]


def _fmt(v):
    return f"{v:.9g}" if isinstance(v, float) else v


def _record(sprites, action, next_sprites, shuffle, rng, z=None):
    if z is None:
        z = encode_oracle(sprites, shuffle=shuffle, rng=rng)
    return {
        "z": z.astype(np.float32),
        "a": np.asarray(action, dtype=np.float32),
        "z_next": encode_oracle(next_sprites, shuffle=shuffle, rng=rng).astype(np.float32),
        "sprites_next": next_sprites,
    }


class _Actor:
    """Rolls exploration episodes with the current sampler and fills the replay."""

    def __init__(self, seed, config: ExploreConfig):
        self.env = tasks.SpriteEnv(tasks.get_task("exploration"), seed=seed, noise=config.noise)
        self.rng = np.random.default_rng(seed)
        self.config = config
        self.sprites = None
        self.hits = []

    def act(self, d_net: DeformationNet, replay: PrioritizedReplay):
        if self.sprites is None:
            self.sprites = self.env.reset().sprites
        z = encode_oracle(self.sprites, shuffle=self.config.shuffle_slots, rng=self.rng)
        action, _ = sample_action(d_net, z, self.rng)
        self.hits.append(env.hit_test(self.sprites, action[0], action[1]) is not None)
        result = self.env.step(action)
        replay.add(_record(self.sprites, action, result.sprites, self.config.shuffle_slots, self.rng, z=z))
        self.sprites = None if result.done else result.sprites


def _batch_inputs(records, mode):
    x_next = None
    if mode == "pixel":
        x_next = np.stack([env.render(s) for s in records["sprites_next"]])
    return records["z"], records["a"], x_next, records["z_next"]


def exploration_phase(config: ExploreConfig, out_dir=None, build: str = "", t_model=None, d_net=None,
                      progress=None) -> ExplorationResult:
    """Adversarial training of the transition model and the action sampler."""
    rng = np.random.default_rng(config.seed)
    init_rng = np.random.default_rng([config.seed, 1])
    t_model = t_model or TransitionModel(init_rng, mode=config.mode, lr=config.lr,
                                         matching_scale=config.matching_scale)
    d_net = d_net or DeformationNet(init_rng)
    explorer = Explorer(d_net, lr=config.lr)
    replay = PrioritizedReplay(config.replay_capacity, config.alpha, config.beta)
    eval_rng = np.random.default_rng([config.seed, 2])
    eval_scenes = [tasks.generate_episode(tasks.get_task("exploration"), eval_rng)
                   for _ in range(config.hit_rate_scenes)]

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "explore_metrics.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()

    actors = [_Actor([config.seed, 100 + i], config) for i in range(config.actors)]
    stop = threading.Event()
    threads = []
    if config.actors > 1:
        threads = _start_actor_threads(actors, d_net, replay, config, stop)
    else:
        while len(replay) < config.batch_size:
            actors[0].act(d_net, replay)

    metrics = []
    good = (t_model.net.copy(), d_net.net.copy())
    acc = {}
    try:
        for step in range(1, config.steps + 1):
            if config.actors == 1:
                for _ in range(config.env_steps_per_update):
                    actors[0].act(d_net, replay)
            idx, records, weights = replay.sample(config.batch_size, rng)
            z, a, x_next, z_next = _batch_inputs(records, config.mode)
            t_stats = t_model.train_step(z, a, x_next=x_next, z_next=z_next, weights=weights)
            replay.update_priorities(idx, t_stats["l_t"])
            _, states = replay.sample_uniform(config.batch_size, rng)
            e_stats = explorer.train_step(t_model, states["z"], rng)
            for k, v in list(t_stats.items()) + [("explorer_" + k, v) for k, v in e_stats.items()]:
                if k != "l_t":
                    acc[k] = acc.get(k, 0.0) + v
            if step % config.log_every == 0 or step == config.steps:
                n_acc = step % config.log_every or config.log_every
                hits = [h for actor in actors for h in actor.hits[-config.log_every * config.env_steps_per_update:]]
                pri = replay.priorities[:len(replay)]
                row = {
                    "step": step, "env_steps": sum(len(actor.hits) for actor in actors),
                    "seed": config.seed, "build": build,
                    **{k: acc[k] / n_acc for k in ("loss", "loss_t", "loss_err", "loss_l1", "e_pred")},
                    "explorer_loss": acc["explorer_loss"] / n_acc,
                    "explorer_reg": acc["explorer_reg"] / n_acc,
                    "explorer_e_pred": acc["explorer_e_pred"] / n_acc,
                    "explorer_scale": acc["explorer_scale"] / n_acc,
                    "actor_hit_rate": float(np.mean(hits)) if hits else 0.0,
                    "sampler_hit_rate": hit_rate(d_net, eval_scenes, config.hit_rate_samples,
                                                 np.random.default_rng([config.seed, 3, step])),
                    "replay_size": len(replay),
                    "priority_p10": float(np.quantile(pri, 0.1)),
                    "priority_p50": float(np.quantile(pri, 0.5)),
                    "priority_p90": float(np.quantile(pri, 0.9)),
                }
                acc = {}
                metrics.append(row)
                if writer is not None:
                    writer.writerow({k: _fmt(v) for k, v in row.items()})
                    fh.flush()
                if progress is not None:
                    progress(row)
                log.info("explore step %d: loss_t %.4g hit %.3f", step, row["loss_t"], row["sampler_hit_rate"])
                good = (t_model.net.copy(), d_net.net.copy())
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_exploration(out, t_model, d_net, config, build)
    except FloatingPointError:
        if out is not None:
            t_good, d_good = good
            save_checkpoint(out / "last_good.npz", [t_good, d_good], extra={"config": config.__dict__})
        raise
    finally:
        stop.set()
        for t in threads:
            t.join()
        if writer is not None:
            fh.close()

    if out is not None:
        save_exploration(out, t_model, d_net, config, build)
        np.savetxt(out / "priority_histogram.csv", _priority_histogram(replay), delimiter=",",
                   header="bin_low,bin_high,count", comments="", fmt="%.9g")
        z = encode_oracle(eval_scenes[0])
        grids = {w: dump_deformation_grid(d_net, z, w) for w in ("position", "motion")}
        with open(out / "deformation_grid.json", "w") as f:
            json.dump({"sprites": [s.to_dict() for s in eval_scenes[0]], "z": z.tolist(), **grids}, f)
    return ExplorationResult(t_model, d_net, replay, metrics)


def _priority_histogram(replay: PrioritizedReplay, bins: int = 20) -> np.ndarray:
    pri = replay.priorities[:len(replay)]
    counts, edges = np.histogram(pri, bins=bins)
    return np.column_stack([edges[:-1], edges[1:], counts])


def _start_actor_threads(actors, d_net, replay, config, stop):
    lock = threading.Lock()

    def run(actor):
        snapshot = copy.deepcopy(d_net)
        n = 0
        while not stop.is_set():
            if n % config.sync_every == 0:
                with lock:
                    snapshot = copy.deepcopy(d_net)
            actor.act(snapshot, replay)
            n += 1
            if len(replay) >= config.replay_capacity and stop.wait(0.001):
                break

    threads = [threading.Thread(target=run, args=(a,), daemon=True) for a in actors]
    for t in threads:
        t.start()
    while len(replay) < config.batch_size:
        stop.wait(0.01)
    return threads


def save_exploration(out_dir, t_model: TransitionModel, d_net: DeformationNet, config: ExploreConfig,
                     build: str = ""):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"config": {k: v for k, v in config.__dict__.items()}, "build": build,
             "mode": t_model.mode, "matching_scale": t_model.matching_scale}
    save_checkpoint(out / "exploration.npz", [t_model.net, d_net.net], extra=extra)


def load_exploration(path) -> tuple[TransitionModel, DeformationNet, dict]:
    from .autograd import load_checkpoint

    path = Path(path)
    if path.is_dir():
        path = path / "exploration.npz"
    if not path.exists():
        raise FileNotFoundError(f"no exploration checkpoint at {path}")
    header, nets = load_checkpoint(path)
    extra = header["extra"]
    t_model = TransitionModel(mode=extra.get("mode", "matching"),
                              matching_scale=extra.get("matching_scale", DEFAULT_MATCHING_SCALE),
                              dtype=nets["t_net"].dtype)
    t_model.net = nets["t_net"]
    t_model.optimizer = Adam(t_model.net.params(), lr=t_model.optimizer.lr)
    d_net = DeformationNet(dtype=nets["d_net"].dtype)
    d_net.net = nets["d_net"]
    return t_model, d_net, extra
