"""Task-phase agent: a relation-network scorer over predicted next scenes.

Each step the frozen sampler proposes B actions, the frozen transition model
predicts where each would leave the scene, and the scorer (reward or value)
picks the best one; with probability epsilon a fresh proposal is taken
instead. Only the scorer is trained, from a uniform replay.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tasks
from .autograd import MLP, Adam, Tensor, as_tensor, save_checkpoint
from .explorer import DeformationNet, sample_action, sample_actions, sample_uniform_actions
from .replay import UniformReplay
from .transition import TransitionModel
from .vision import NUM_SLOTS, SLOT_DIM, encode_oracle, slots_to_sprites

log = logging.getLogger(__name__)

PAIR_HIDDEN = (128, 128)
GLOBAL_HIDDEN = (128,)
MODES = ("reward", "value")

# every ordered pair (i, j), i != j: the sum over unordered pairs of
# f([z_i; z_j]) + f([z_j; z_i])
_PAIR_I, _PAIR_J = np.nonzero(~np.eye(NUM_SLOTS, dtype=bool))


class RelationScorer:
    """Permutation-invariant scene scorer: global(sum of pair embeddings)."""

    def __init__(self, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.pair_net = MLP((2 * SLOT_DIM, *PAIR_HIDDEN), rng, dtype=dtype, name="r_slot_pair")
        self.global_net = MLP((PAIR_HIDDEN[-1], *GLOBAL_HIDDEN, 1), rng, dtype=dtype, name="r_global")

    @property
    def nets(self) -> list[MLP]:
        return [self.pair_net, self.global_net]

    def params(self):
        return self.pair_net.params() + self.global_net.params()

    # The pair net's first layer is affine in [z_i; z_j], so it splits into
    # per-slot projections; its last layer is affine too and commutes with the
    # sum over pairs. Both are exploited here; the function is unchanged.

    def _as_batch(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=self.pair_net.dtype)
        return z[None] if z.ndim == 2 else z

    def __call__(self, z) -> Tensor:
        z = self._as_batch(z)
        b, k, m = z.shape
        net = self.pair_net
        flat = as_tensor(z.reshape(b * k, m))
        w0, b0 = net.weights[0], net.biases[0]
        left = (flat @ w0[:m]).reshape(b, k, -1)
        right = (flat @ w0[m:]).reshape(b, k, -1)
        h = left.take(_PAIR_I, axis=1) + right.take(_PAIR_J, axis=1) + b0
        for w, bias in zip(net.weights[1:-1], net.biases[1:-1]):
            h = h.relu()
            h = (h.reshape(b * len(_PAIR_I), -1) @ w + bias).reshape(b, len(_PAIR_I), -1)
        emb = h.relu().sum(axis=1) @ net.weights[-1] + net.biases[-1] * float(len(_PAIR_I))
        return self.global_net(emb).reshape(b)

    def predict(self, z) -> np.ndarray:
        z = self._as_batch(z)
        b, k, m = z.shape
        net = self.pair_net
        w0, b0 = net.weights[0].data, net.biases[0].data
        flat = z.reshape(b * k, m)
        left = (flat @ w0[:m]).reshape(b, k, -1)
        right = (flat @ w0[m:]).reshape(b, k, -1)
        h = left[:, _PAIR_I] + right[:, _PAIR_J] + b0
        for w, bias in zip(net.weights[1:-1], net.biases[1:-1]):
            h = np.maximum(h, 0.0) @ w.data + bias.data
        emb = np.maximum(h, 0.0).sum(axis=1) @ net.weights[-1].data + net.biases[-1].data * len(_PAIR_I)
        return self.global_net.forward_numpy(emb).reshape(b).astype(np.float64)

    def predict_reference(self, z) -> np.ndarray:
        """Literal form: global(sum over ordered pairs of pair_net([z_i; z_j]))."""
        z = self._as_batch(z)
        pairs = np.concatenate([z[:, _PAIR_I], z[:, _PAIR_J]], axis=-1)
        b, p, d = pairs.shape
        emb = self.pair_net.forward_numpy(pairs.reshape(b * p, d)).reshape(b, p, -1).sum(axis=1)
        return self.global_net.forward_numpy(emb).reshape(b).astype(np.float64)

    def fingerprint(self) -> str:
        return self.pair_net.fingerprint() + self.global_net.fingerprint()


class RewardPredictor(RelationScorer):
    pass


class ValuePredictor(RelationScorer):
    def __init__(self, rng=None, dtype=np.float32, gamma: float = 0.9):
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
        super().__init__(rng, dtype)
        self.gamma = gamma


def predict_reward(rp: RelationScorer, z) -> float:
    return float(rp.predict(np.asarray(z)[None])[0])


predict_value = predict_reward


def value_losses(vp: ValuePredictor, t_model: TransitionModel, sample: dict) -> tuple[Tensor, Tensor, Tensor]:
    """TD loss on observed next scenes, TD loss on predicted next scenes, and
    their consistency. Bootstrap targets are constants.

    `sample` may carry "z_pred" = T(z, a) precomputed (the transition model is
    frozen during the task phase, so it equals a fresh prediction).
    """
    z, z_next = np.asarray(sample["z"]), np.asarray(sample["z_next"])
    r = np.asarray(sample["r"], dtype=vp.pair_net.dtype)
    gamma = np.asarray(sample["gamma"], dtype=vp.pair_net.dtype)
    z_pred = sample.get("z_pred")
    if z_pred is None:
        z_pred, _ = t_model.predict_batch(z, sample["a"])
    b = len(z)
    values = vp(np.concatenate([z, z_next, np.asarray(z_pred, dtype=z.dtype)]))
    v, v_next, v_pred = values[:b], values[b:2 * b], values[2 * b:]
    loss_td = (r + gamma * v_next.data - v).square().mean()
    loss_td_pred = (r + gamma * v_pred.data - v).square().mean()
    loss_consistency = (v_next - v_pred).square().mean()
    return loss_td, loss_td_pred, loss_consistency


@dataclass
class AgentConfig:
    mode: str = "reward"
    branching: int = 128
    train_steps: int = 10
    batch_size: int = 16
    epsilon: float = 0.2
    lr: float = 3e-4
    gamma: float = 0.9
    replay_capacity: int = 50_000
    ablate_uniform_sampler: bool = False
    shuffle_slots: bool = True
    noise: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


class TaskAgent:
    """Frozen transition model and sampler plus a trainable scorer."""

    def __init__(self, t_model: TransitionModel, d_net: Optional[DeformationNet], config: AgentConfig,
                 rng: Optional[np.random.Generator] = None, scorer: Optional[RelationScorer] = None):
        self.t_model = t_model
        self.d_net = d_net
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(0)
        if scorer is None:
            if config.mode == "value":
                scorer = ValuePredictor(self.rng, gamma=config.gamma)
            else:
                scorer = RewardPredictor(self.rng)
        self.scorer = scorer
        self.optimizer = Adam(scorer.params(), lr=config.lr)
        self.replay = UniformReplay(config.replay_capacity)
        # optional override used for oracle runs: maps predicted scenes (B, K, M) -> scores (B,)
        self.score_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
        if d_net is None and not config.ablate_uniform_sampler:
            raise ValueError("a sampler network is required unless the uniform sampler is used")

    # -- acting ---------------------------------------------------------------

    def propose(self, z: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.config.ablate_uniform_sampler:
            return sample_uniform_actions(n, rng)[0]
        if n == 1:
            return sample_action(self.d_net, z, rng)[0][None]
        return sample_actions(self.d_net, z, n, rng)[0]

    def score(self, z_pred: np.ndarray) -> np.ndarray:
        if self.score_fn is not None:
            return np.asarray(self.score_fn(z_pred), dtype=np.float64)
        return self.scorer.predict(z_pred)

    def select_action(self, z: np.ndarray, epsilon: float, rng: np.random.Generator,
                      branching: Optional[int] = None) -> tuple[np.ndarray, bool]:
        """Returns (action, greedy). Never changes any parameter."""
        if rng.random() < epsilon:
            return self.propose(z, 1, rng)[0], False
        b = branching or self.config.branching
        actions = self.propose(z, b, rng)
        z_pred, _ = self.t_model.predict_batch(np.broadcast_to(z, (b, *np.shape(z))), actions)
        return actions[int(np.argmax(self.score(z_pred)))], True

    # -- learning -------------------------------------------------------------

    def encode(self, sprites) -> np.ndarray:
        return encode_oracle(sprites, shuffle=self.config.shuffle_slots, rng=self.rng).astype(np.float32)

    def train_scorer(self) -> float:
        """N minibatch steps; returns the mean loss."""
        if len(self.replay) == 0:
            return float("nan")
        total = 0.0
        for _ in range(self.config.train_steps):
            batch = self.replay.sample(self.config.batch_size, self.rng)
            if self.config.mode == "value":
                loss = sum(value_losses(self.scorer, self.t_model, batch), Tensor(np.zeros((), np.float32)))
            else:
                target = np.asarray(batch["r"], dtype=self.scorer.pair_net.dtype)
                loss = (self.scorer(batch["z"]) - target).square().mean()
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"scorer loss is not finite: {value}")
            for net in self.scorer.nets:
                net.zero_grad()
            loss.backward()
            self.optimizer.step()
            total += value
        return total / self.config.train_steps

    def frozen_fingerprint(self) -> str:
        parts = [self.t_model.net.fingerprint()]
        if self.d_net is not None:
            parts.append(self.d_net.net.fingerprint())
        return "".join(parts)


def oracle_scorer(task: tasks.TaskSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Scores predicted scenes with the true task reward of the decoded sprites."""
    def score(z_pred):
        return np.array([tasks.reward(task, slots_to_sprites(z))[0] for z in z_pred])
    return score


# -- task phase -----------------------------------------------------------------

EPISODE_FIELDS = ["episode", "seed", "build", "steps", "cumulative_steps", "return", "success", "loss"]


def episode_seed(master_seed: int, episode: int, stream: int = 0) -> int:
    """Per-episode environment seed derived from the master seed."""
    return int(np.random.SeedSequence([master_seed, stream, episode]).generate_state(1)[0])


def run_episode(agent: TaskAgent, task: tasks.TaskSpec, seed: int, epsilon: float, train: bool,
                trajectory: bool = False, max_episode_length: Optional[int] = None) -> dict:
    """Play one episode; with `train`, store records and update the scorer each step."""
    environment = tasks.SpriteEnv(task, seed=seed, noise=agent.config.noise,
                                  max_episode_length=max_episode_length)
    res = environment.reset()
    sprites = res.sprites
    z = agent.encode(sprites)
    ret, losses, frames = 0.0, [], []
    success = res.success
    steps = 0
    while not res.done:
        action, greedy = agent.select_action(z, epsilon, agent.rng)
        res = environment.step(action)
        steps += 1
        z_next = agent.encode(res.sprites)
        ret += res.reward
        success = res.success
        if trajectory:
            frames.append({"t": steps - 1, "sprites": [s.to_dict() for s in sprites], "action": action.tolist(),
                           "greedy": greedy, "reward": res.reward, "success": res.success})
        if train:
            if agent.config.mode == "value":
                gamma = 0.0 if res.success else agent.scorer.gamma
                z_pred, _ = agent.t_model.predict_batch(z[None], action[None])
                agent.replay.add({"z": z, "a": action.astype(np.float32), "z_next": z_next,
                                  "z_pred": z_pred[0].astype(np.float32), "r": np.float32(res.reward),
                                  "gamma": np.float32(gamma)})
            else:
                agent.replay.add({"z": z_next, "r": np.float32(res.reward)})
            losses.append(agent.train_scorer())
        sprites, z = res.sprites, z_next
    out = {"steps": steps, "return": ret, "success": bool(success),
           "loss": float(np.mean(losses)) if losses else float("nan")}
    if trajectory:
        out["trajectory"] = frames
        out["final_sprites"] = [s.to_dict() for s in sprites]
    return out


@dataclass
class TaskPhaseResult:
    episodes: list
    agent: TaskAgent

    @property
    def curve(self) -> list[tuple[int, bool]]:
        return [(e["cumulative_steps"], e["success"]) for e in self.episodes]


def task_phase(agent: TaskAgent, task: tasks.TaskSpec, episodes: int = 1000, seed: int = 0,
               out_dir=None, build: str = "", max_steps: Optional[int] = None,
               progress: Optional[Callable[[dict], None]] = None) -> TaskPhaseResult:
    """Train the scorer on `task` with epsilon-greedy search over frozen components.

    Stops after `episodes` episodes, or earlier once `max_steps` environment
    steps have been taken.
    """
    frozen = agent.frozen_fingerprint()
    out = Path(out_dir) if out_dir is not None else None
    fh_csv = fh_jsonl = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh_csv = open(out / "task_metrics.csv", "w", newline="")
        writer = csv.DictWriter(fh_csv, fieldnames=EPISODE_FIELDS)
        writer.writeheader()
        fh_jsonl = open(out / "episodes.jsonl", "w")
    rows, cumulative = [], 0
    good = [n.copy() for n in agent.scorer.nets]
    try:
        for ep in range(episodes):
            result = run_episode(agent, task, episode_seed(seed, ep), agent.config.epsilon, train=True)
            cumulative += result["steps"]
            row = {"episode": ep, "seed": seed, "build": build, "steps": result["steps"],
                   "cumulative_steps": cumulative, "return": result["return"], "success": result["success"],
                   "loss": result["loss"]}
            rows.append(row)
            if writer is not None:
                writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
                fh_jsonl.write(json.dumps(row, sort_keys=True) + "\n")
            if progress is not None:
                progress(row)
            good = [n.copy() for n in agent.scorer.nets]
            if max_steps is not None and cumulative >= max_steps:
                break
    except FloatingPointError:
        if out is not None:
            save_checkpoint(out / "last_good_scorer.npz", good, extra={"mode": agent.config.mode})
        raise
    finally:
        if fh_csv is not None:
            fh_csv.close()
            fh_jsonl.close()
    if agent.frozen_fingerprint() != frozen:
        raise RuntimeError("frozen exploration components changed during the task phase")
    if out is not None:
        save_scorer(out, agent, extra={"task": task.name, "split": task.split, "sparse": task.sparse})
    return TaskPhaseResult(rows, agent)


def save_scorer(out_dir, agent: TaskAgent, extra: Optional[dict] = None):
    meta = {"agent_config": asdict(agent.config), **(extra or {})}
    save_checkpoint(Path(out_dir) / "scorer.npz", agent.scorer.nets, extra=meta)


def load_scorer(path) -> tuple[RelationScorer, dict]:
    from .autograd import load_checkpoint

    path = Path(path)
    if path.is_dir():
        path = path / "scorer.npz"
    if not path.exists():
        raise FileNotFoundError(f"no scorer checkpoint at {path}")
    header, nets = load_checkpoint(path)
    cfg = header["extra"].get("agent_config", {})
    if cfg.get("mode") == "value":
        scorer = ValuePredictor(gamma=cfg.get("gamma", 0.9), dtype=nets["r_global"].dtype)
    else:
        scorer = RewardPredictor(dtype=nets["r_global"].dtype)
    scorer.pair_net, scorer.global_net = nets["r_slot_pair"], nets["r_global"]
    return scorer, header["extra"]


def evaluate(agent: TaskAgent, task: tasks.TaskSpec, episodes: int = 100, seed: int = 0) -> float:
    """Greedy success rate; nothing is trained or stored."""
    wins = 0
    for ep in range(episodes):
        wins += run_episode(agent, task, episode_seed(seed, ep, stream=1), 0.0, train=False)["success"]
    return wins / episodes
