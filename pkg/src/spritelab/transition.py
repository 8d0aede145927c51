"""Action-conditioned slot-wise transition model.

One MLP is shared across slots and maps [slot; action] (12 values) to an
8-dim slot delta plus one error-prediction contribution. The predicted error
of a transition is the sum of the contributions over slots.

Training minimises, per sample,

    L_T + (e_pred - L_T)^2 + w |deltas|_1

where L_T is either the pixel loss through the soft decoder or the
slot-matching loss, and L_T enters the error term as a constant target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autograd import MLP, Adam, Tensor, as_tensor, concat
from .vision import SLOT_DIM, decode_soft, match_slots

ACTION_DIM = 4
HIDDEN = (512, 512, 512)
# The slot-matching loss is the mean squared slot error times MATCHING_SCALE.
# At this scale a noisy hit costs ~1, which keeps the squared error-prediction
# term (~L_T^2) from swamping the trunk. The L1 delta penalty and the
# sampler's deformation penalty are both sized for pixel losses, so in
# matching mode the L1 weight is matching_scale / PIXEL_EQUIVALENT_SCALE and
# curiosity is multiplied by the inverse (ratio from
# `calibrate_matching_scale` on noisy exploration hits). Without the L1
# rescale the penalty cancels the gradient of the rare hit transitions.
DEFAULT_MATCHING_SCALE = 1.0e4
PIXEL_EQUIVALENT_SCALE = 8.0e5
MODES = ("matching", "pixel")


@dataclass
class TransitionPrediction:
    z_next_pred: np.ndarray
    e_pred: np.ndarray


class TransitionModel:
    def __init__(self, rng: Optional[np.random.Generator] = None, mode: str = "matching", lr: float = 3e-4,
                 matching_scale: float = DEFAULT_MATCHING_SCALE, dtype=np.float32, hidden=HIDDEN):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.net = MLP((SLOT_DIM + ACTION_DIM, *hidden, SLOT_DIM + 1), rng, dtype=dtype, name="t_net",
                       zero_output=True)
        self.mode = mode
        self.matching_scale = matching_scale
        self.optimizer = Adam(self.net.params(), lr=lr)

    @property
    def curiosity_scale(self) -> float:
        """Factor that puts e_pred in pixel-loss units."""
        return 1.0 if self.mode == "pixel" else PIXEL_EQUIVALENT_SCALE / self.matching_scale

    @property
    def l1_weight(self) -> float:
        return 1.0 / self.curiosity_scale

    # -- forward ------------------------------------------------------------

    def forward(self, z, a, frozen: bool = False):
        """Differentiable prediction for a batch: returns (z_next, e_pred, deltas)
        with shapes (B, K, 8), (B,), (B, K, 8)."""
        z = as_tensor(z, self.net.dtype)
        a = as_tensor(a, self.net.dtype)
        b, k, m = z.shape
        a_tiled = a.reshape(b, 1, ACTION_DIM) + np.zeros((b, k, ACTION_DIM), dtype=self.net.dtype)
        out = self.net(concat([z, a_tiled], axis=-1).reshape(b * k, m + ACTION_DIM), frozen=frozen)
        out = out.reshape(b, k, m + 1)
        deltas = out[:, :, :m]
        e_pred = out[:, :, m].sum(axis=1)
        return z + deltas, e_pred, deltas

    def predict_batch(self, z: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Plain numpy prediction, (B, K, 8) x (B, 4) -> ((B, K, 8), (B,))."""
        z = np.asarray(z, dtype=self.net.dtype)
        a = np.asarray(a, dtype=self.net.dtype)
        b, k, m = z.shape
        x = np.concatenate([z, np.broadcast_to(a[:, None, :], (b, k, ACTION_DIM))], axis=-1)
        out = self.net.forward_numpy(x.reshape(b * k, m + ACTION_DIM)).reshape(b, k, m + 1)
        return z + out[:, :, :m], out[:, :, m].sum(axis=1)

    def predict(self, z: np.ndarray, a) -> TransitionPrediction:
        zn, e = self.predict_batch(np.asarray(z)[None], np.asarray(a, dtype=np.float64)[None])
        return TransitionPrediction(zn[0], float(e[0]))

    def rollout(self, z0: np.ndarray, actions: Sequence) -> list[np.ndarray]:
        out, z = [], np.asarray(z0)
        for a in actions:
            z = self.predict(z, a).z_next_pred
            out.append(z)
        return out

    # -- losses -------------------------------------------------------------

    def pixel_loss(self, z_next_pred: Tensor, x_next: np.ndarray) -> Tensor:
        """Per-sample squared pixel error summed over pixels and channels."""
        diff = decode_soft(z_next_pred) - np.asarray(x_next, dtype=z_next_pred.data.dtype)
        return diff.square().sum(axis=(1, 2, 3))

    def matching_loss(self, z_next_pred: Tensor, z_next: np.ndarray) -> Tensor:
        """Per-sample slot-matching loss.

        Every slot of the observed next scene is paired with its closest
        predicted slot; the loss is the mean squared error over slots and
        dims of those pairs, times `matching_scale`.
        """
        z_next = np.asarray(z_next, dtype=z_next_pred.data.dtype)
        mapping = match_slots(z_next_pred.data, z_next).mapping
        rows = np.arange(z_next.shape[0])[:, None]
        matched = z_next_pred[rows, mapping]
        return (matched - z_next).square().mean(axis=(1, 2)) * self.matching_scale

    def transition_loss(self, z_next_pred: Tensor, x_next=None, z_next=None) -> Tensor:
        if self.mode == "pixel":
            return self.pixel_loss(z_next_pred, x_next)
        return self.matching_loss(z_next_pred, z_next)

    def losses(self, z, a, x_next=None, z_next=None, weights=None, frozen: bool = False) -> dict:
        z_pred, e_pred, deltas = self.forward(z, a, frozen=frozen)
        l_t = self.transition_loss(z_pred, x_next=x_next, z_next=z_next)
        err = (e_pred - l_t.detach()).square()
        l1 = deltas.abs().sum(axis=(1, 2)) * self.l1_weight
        per_sample = l_t + err + l1
        if weights is None:
            total = per_sample.mean()
        else:
            total = (per_sample * np.asarray(weights, dtype=self.net.dtype)).mean()
        return {"total": total, "l_t": l_t, "err": err, "l1": l1, "e_pred": e_pred}

    def train_step(self, z, a, x_next=None, z_next=None, weights=None) -> dict:
        """One Adam step; returns scalar stats plus per-sample `l_t` (for priorities)."""
        parts = self.losses(z, a, x_next=x_next, z_next=z_next, weights=weights)
        total = parts["total"]
        if not np.isfinite(total.item()):
            raise FloatingPointError(f"transition loss is not finite: {total.item()}")
        self.net.zero_grad()
        total.backward()
        self.optimizer.step()
        return {
            "loss": total.item(),
            "loss_t": float(parts["l_t"].data.mean()),
            "loss_err": float(parts["err"].data.mean()),
            "loss_l1": float(parts["l1"].data.mean()),
            "e_pred": float(parts["e_pred"].data.mean()),
            "l_t": parts["l_t"].data.astype(np.float64),
        }


def calibrate_matching_scale(n: int = 300, seed: int = 0) -> float:
    """Ratio of pixel loss to mean-squared slot error on noisy hit transitions.

    Both are measured for a prediction that gets the noise-free motion right,
    so only the unpredictable motion noise remains; the static soft-vs-hard
    rendering floor is subtracted from the pixel side.
    """
    from . import env, tasks
    from .vision import encode_oracle

    rng = np.random.default_rng(seed)
    task = tasks.get_task("exploration")
    pix, lat = [], []
    while len(pix) < n:
        sprites = tasks.generate_episode(task, rng)
        target = sprites[rng.integers(len(sprites))]
        action = np.array([target.x, target.y, *rng.uniform(0.0, 1.0, 2)])
        if env.hit_test(sprites, action[0], action[1]) is None:
            continue
        expected = env.step(sprites, action, False)
        observed = env.step(sprites, action, True, rng)
        z_exp, z_obs = encode_oracle(expected), encode_oracle(observed)
        img = env.render(observed)
        floor = np.sum((decode_soft(z_obs).data - img) ** 2)
        pix.append(np.sum((decode_soft(z_exp).data - img) ** 2) - floor)
        lat.append(np.mean((z_exp - z_obs) ** 2))
    return float(np.mean(pix) / np.mean(lat))
