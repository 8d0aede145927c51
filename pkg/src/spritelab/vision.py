"""Slot scene representation: oracle encoder, soft decoder, slot matching.

A scene is a (K, M) = (8, 8) array. Each occupied slot holds
[presence, x, y, hue, saturation, square, circle, triangle]; blank slots
are all zero. K - 1 sprites at most, one slot kept free the way a learned
decomposition reserves one for the background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import env
from .autograd import Tensor, as_tensor
from .env import SHAPES, SpriteState

NUM_SLOTS = 8
SLOT_DIM = 8
PRESENCE, X, Y, HUE, SAT = range(5)
SHAPE_START = 5
EDGE_SHARPNESS = 1.0 / env.IMAGE_SIZE  # one pixel
_CIRCLE_EPS = 1e-9


def encode_oracle(sprites: Sequence[SpriteState], shuffle: bool = False,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if len(sprites) > NUM_SLOTS - 1:
        raise ValueError(f"at most {NUM_SLOTS - 1} sprites fit in {NUM_SLOTS} slots, got {len(sprites)}")
    z = np.zeros((NUM_SLOTS, SLOT_DIM))
    for k, s in enumerate(sorted(sprites, key=lambda s: s.z_layer)):
        z[k, :SHAPE_START] = (1.0, s.x, s.y, s.hue, s.saturation)
        z[k, SHAPE_START + SHAPES.index(s.shape)] = 1.0
    if shuffle:
        if rng is None:
            raise ValueError("shuffle requires an rng")
        z = z[rng.permutation(NUM_SLOTS)]
    return z


def occupied(z: np.ndarray) -> np.ndarray:
    return np.any(np.asarray(z) != 0.0, axis=-1)


def slots_to_sprites(z: np.ndarray, presence_threshold: float = 0.5) -> list[SpriteState]:
    """Read sprites back out of a (possibly predicted) slot tensor.

    Slots whose presence is below the threshold are dropped; the shape is the
    largest shape entry; positions and colours are clipped to range.
    """
    out = []
    for k, row in enumerate(np.asarray(z, dtype=np.float64)):
        if row[PRESENCE] < presence_threshold:
            continue
        shape = SHAPES[int(np.argmax(row[SHAPE_START:SHAPE_START + len(SHAPES)]))]
        x, y = np.clip(row[[X, Y]], 0.0, 1.0)
        out.append(SpriteState(float(x), float(y), shape, float(np.clip(row[HUE], 0.0, 1.0)),
                               float(np.clip(row[SAT], 0.0, 1.0)), 1.0, k))
    return out


# -- soft decoder -------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _hue_channels(h, s):
    """RGB with value 1 plus partial derivatives w.r.t. hue and saturation."""
    rgb, d_h, d_s = [], [], []
    for n in (5.0, 3.0, 1.0):
        k = np.mod(n + 6.0 * h, 6.0)
        f = np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
        slope = np.where(k < 1.0, 1.0, 0.0) - np.where((k > 3.0) & (k < 4.0), 1.0, 0.0)
        rgb.append(1.0 - s * f)
        d_s.append(-f)
        d_h.append(-s * slope * 6.0)
    return np.stack(rgb, -1), np.stack(d_h, -1), np.stack(d_s, -1)


def _pixel_grid(size):
    c = (np.arange(size) + 0.5) / size
    return c[None, :], c[:, None]  # px varies along columns, py along rows


def decode_soft(slots, size: int = env.IMAGE_SIZE) -> Tensor:
    """Differentiable render of (..., K, 8) slots to (..., size, size, 3).

    Each slot contributes a sigmoid-edged shape from a signed distance field;
    alpha = presence * shape coverage, composited over black in slot order.
    """
    slots = as_tensor(slots)
    z = slots.data
    lead = z.shape[:-2]
    zf = z.reshape(-1, z.shape[-2], SLOT_DIM).astype(np.float64)
    b, k = zf.shape[:2]
    gx, gy = _pixel_grid(size)
    tau = EDGE_SHARPNESS

    pres = zf[:, :, PRESENCE, None, None]
    dx = gx[None, None] - zf[:, :, X, None, None]
    dy = gy[None, None] - zf[:, :, Y, None, None]
    adx, ady = np.abs(dx), np.abs(dy)
    sdf_sq = np.maximum(adx, ady) - env.SQUARE_HALF
    rho = np.sqrt(dx * dx + dy * dy + _CIRCLE_EPS ** 2)
    sdf_ci = rho - env.CIRCLE_RADIUS
    proj = np.stack([nx * dx + ny * dy for nx, ny in env.TRIANGLE_NORMALS])
    tri_arg = proj.argmax(axis=0)
    sdf_tr = proj.max(axis=0) - env.TRIANGLE_INRADIUS
    covs = [_sigmoid(-sdf / tau) for sdf in (sdf_sq, sdf_ci, sdf_tr)]
    w = [zf[:, :, SHAPE_START + i, None, None] for i in range(3)]
    cov = w[0] * covs[0] + w[1] * covs[1] + w[2] * covs[2]
    raw_alpha = pres * cov
    alpha = np.clip(raw_alpha, 0.0, 1.0)
    colour, dcol_dh, dcol_ds = _hue_channels(zf[:, :, HUE], zf[:, :, SAT])  # (b, k, 3)

    canvases = np.empty((k + 1, b, size, size, 3))
    canvases[0] = 0.0
    for i in range(k):
        a = alpha[:, i, :, :, None]
        canvases[i + 1] = canvases[i] * (1.0 - a) + a * colour[:, i, None, None, :]
    out = canvases[k].reshape(*lead, size, size, 3)

    def backward(g):
        g = g.reshape(b, size, size, 3).astype(np.float64)
        d_alpha = np.empty_like(alpha)
        d_colour = np.empty_like(colour)
        for i in reversed(range(k)):
            a = alpha[:, i, :, :, None]
            d_alpha[:, i] = np.sum(g * (colour[:, i, None, None, :] - canvases[i]), axis=-1)
            d_colour[:, i] = np.sum(g * a, axis=(1, 2))
            g = g * (1.0 - a)
        d_raw = d_alpha * ((raw_alpha > 0.0) & (raw_alpha < 1.0))
        d_z = np.zeros_like(zf)
        d_z[:, :, PRESENCE] = np.sum(d_raw * cov, axis=(2, 3))
        d_cov = d_raw * pres
        d_dx = np.zeros(rho.shape)
        d_dy = np.zeros(rho.shape)
        for s in range(3):
            d_z[:, :, SHAPE_START + s] = np.sum(d_cov * covs[s], axis=(2, 3))
            d_sdf = d_cov * w[s] * (-1.0 / tau) * covs[s] * (1.0 - covs[s])
            if s == 0:
                along_x = adx >= ady
                d_dx += d_sdf * along_x * np.sign(dx)
                d_dy += d_sdf * ~along_x * np.sign(dy)
            elif s == 1:
                d_dx += d_sdf * dx / rho
                d_dy += d_sdf * dy / rho
            else:
                normals = env.TRIANGLE_NORMALS[tri_arg]
                d_dx += d_sdf * normals[..., 0]
                d_dy += d_sdf * normals[..., 1]
        d_z[:, :, X] = -np.sum(d_dx, axis=(2, 3))
        d_z[:, :, Y] = -np.sum(d_dy, axis=(2, 3))
        d_z[:, :, HUE] = np.sum(d_colour * dcol_dh, axis=-1)
        d_z[:, :, SAT] = np.sum(d_colour * dcol_ds, axis=-1)
        slots._accumulate(d_z.reshape(z.shape).astype(z.dtype))

    return Tensor.make(out.astype(z.dtype), (slots,), backward, "decode_soft")


# -- slot matching ------------------------------------------------------------

@dataclass
class SlotMatching:
    mapping: np.ndarray  # mapping[i] = source slot assigned to target slot i
    costs: np.ndarray    # per-target MSE of the chosen pair

    @property
    def total(self) -> float:
        return float(self.costs.sum())


def pairwise_slot_mse(sources: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """cost[..., i, j] = mean over dims of (targets[i] - sources[j])^2."""
    diff = np.asarray(targets)[..., :, None, :] - np.asarray(sources)[..., None, :, :]
    return np.mean(diff * diff, axis=-1)


def match_slots(z_prev: np.ndarray, z_next: np.ndarray) -> SlotMatching:
    """For every slot of z_next, the z_prev slot with lowest MSE (ties: lowest index).

    Several targets may pick the same source. Accepts leading batch axes.
    """
    z_prev, z_next = np.asarray(z_prev), np.asarray(z_next)
    if z_prev.shape != z_next.shape:
        raise ValueError(f"slot tensors differ in shape: {z_prev.shape} vs {z_next.shape}")
    cost = pairwise_slot_mse(z_prev, z_next)
    mapping = np.argmin(cost, axis=-1)
    chosen = np.take_along_axis(cost, mapping[..., None], axis=-1)[..., 0]
    return SlotMatching(mapping, chosen)
