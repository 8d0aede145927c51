"""Click-and-push sprite environment.

Frame coordinates are in frame widths, origin at the top-left corner with y
increasing downward (raster order). An action is a point in [0, 1]^4: a
position click followed by a motion click. If the position click lands in a
sprite, the topmost such sprite is pushed by 0.25 * (motion - 0.5), plus
optional Gaussian noise, and its position is clipped back into the frame.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

SHAPES = ("square", "circle", "triangle")
SPRITE_AREA = 0.017
MOTION_SCALE = 0.25
NOISE_STD = 0.05  # variance 0.0025 per coordinate
IMAGE_SIZE = 64
ANTI_ALIASING = 5

SQUARE_HALF = math.sqrt(SPRITE_AREA) / 2.0
CIRCLE_RADIUS = math.sqrt(SPRITE_AREA / math.pi)
TRIANGLE_SIDE = math.sqrt(4.0 * SPRITE_AREA / math.sqrt(3.0))
TRIANGLE_INRADIUS = TRIANGLE_SIDE / (2.0 * math.sqrt(3.0))
# outward edge normals of a point-up equilateral triangle (y down)
TRIANGLE_NORMALS = np.array([
    [0.0, 1.0],
    [math.sqrt(3.0) / 2.0, -0.5],
    [-math.sqrt(3.0) / 2.0, -0.5],
])


@dataclass(frozen=True)
class SpriteState:
    x: float
    y: float
    shape: str = "square"
    hue: float = 0.0
    saturation: float = 1.0
    value: float = 1.0
    z_layer: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")

    def moved_to(self, x: float, y: float) -> "SpriteState":
        return dataclasses.replace(self, x=float(x), y=float(y))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpriteState":
        return cls(**d)


def as_action(action: Sequence[float]) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (4,):
        raise ValueError(f"action must have 4 components, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < 0.0) or np.any(a > 1.0):
        raise ValueError(f"action components must lie in [0, 1]: {a}")
    return a


def motion_delta(action: Sequence[float]) -> np.ndarray:
    """Displacement (before noise and clipping) that a hit action applies."""
    a = np.asarray(action, dtype=np.float64)
    return MOTION_SCALE * (a[..., 2:4] - 0.5)


# -- geometry ---------------------------------------------------------------

def shape_contains(shape: str, dx, dy):
    """Exact containment test for offsets (dx, dy) from a sprite centre.

    Works elementwise on arrays. Boundary points count as inside.
    """
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if shape == "square":
        return (np.abs(dx) <= SQUARE_HALF) & (np.abs(dy) <= SQUARE_HALF)
    if shape == "circle":
        return dx * dx + dy * dy <= CIRCLE_RADIUS * CIRCLE_RADIUS
    if shape == "triangle":
        inside = np.ones(np.broadcast(dx, dy).shape, dtype=bool)
        for nx, ny in TRIANGLE_NORMALS:
            inside &= nx * dx + ny * dy <= TRIANGLE_INRADIUS
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def shape_vertices(shape: str) -> Optional[np.ndarray]:
    """Polygon vertices relative to the centre, or None for the circle."""
    if shape == "square":
        h = SQUARE_HALF
        return np.array([[-h, -h], [h, -h], [h, h], [-h, h]])
    if shape == "triangle":
        r = 2.0 * TRIANGLE_INRADIUS
        a = TRIANGLE_SIDE
        return np.array([[0.0, -r], [a / 2.0, r / 2.0], [-a / 2.0, r / 2.0]])
    if shape == "circle":
        return None
    raise ValueError(f"unknown shape {shape!r}")


def hit_test(sprites: Sequence[SpriteState], px: float, py: float) -> Optional[int]:
    """Index of the highest-z sprite whose region contains (px, py), else None.

    Equal z layers resolve to the later sprite in the list.
    """
    best = None
    for i, s in enumerate(sprites):
        if shape_contains(s.shape, px - s.x, py - s.y):
            if best is None or s.z_layer >= sprites[best].z_layer:
                best = i
    return best


# -- dynamics ---------------------------------------------------------------

def step(sprites: Sequence[SpriteState], action: Sequence[float], noise_enabled: bool = False,
         rng: Optional[np.random.Generator] = None) -> list[SpriteState]:
    a = as_action(action)
    sprites = list(sprites)
    idx = hit_test(sprites, a[0], a[1])
    if idx is None:
        return sprites
    s = sprites[idx]
    pos = np.array([s.x, s.y]) + motion_delta(a)
    if noise_enabled:
        if rng is None:
            raise ValueError("noise_enabled requires an rng")
        pos = pos + rng.normal(0.0, NOISE_STD, size=2)
    pos = np.clip(pos, 0.0, 1.0)
    sprites[idx] = s.moved_to(pos[0], pos[1])
    return sprites


# -- rendering --------------------------------------------------------------

def hsv_to_rgb(h, s, v):
    """Vectorised HSV -> RGB, hue wrapping at 1."""
    h = np.asarray(h, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = []
    for n in (5.0, 3.0, 1.0):
        k = np.mod(n + 6.0 * h, 6.0)
        out.append(v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0))
    return np.stack(out, axis=-1)


def _sample_grid(resolution: int) -> np.ndarray:
    return (np.arange(resolution) + 0.5) / resolution


def render(sprites: Sequence[SpriteState], size: int = IMAGE_SIZE,
           anti_aliasing: int = ANTI_ALIASING) -> np.ndarray:
    """Render to a (size, size, 3) float image in [0, 1] on a black background."""
    res = size * anti_aliasing
    coords = _sample_grid(res)
    canvas = np.zeros((res, res, 3))
    for s in sorted(sprites, key=lambda s: s.z_layer):
        # restrict work to the sprite's bounding box
        r = 2.0 * TRIANGLE_INRADIUS + 1.0 / res
        lo_x, hi_x = np.searchsorted(coords, [s.x - r, s.x + r])
        lo_y, hi_y = np.searchsorted(coords, [s.y - r, s.y + r])
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        gx = coords[lo_x:hi_x][None, :]
        gy = coords[lo_y:hi_y][:, None]
        mask = shape_contains(s.shape, gx - s.x, gy - s.y)
        colour = hsv_to_rgb(s.hue, s.saturation, s.value)
        canvas[lo_y:hi_y, lo_x:hi_x][mask] = colour
    return canvas.reshape(size, anti_aliasing, size, anti_aliasing, 3).mean(axis=(1, 3))


# -- cluster quality ----------------------------------------------------------

def davies_bouldin(points: np.ndarray, labels: Sequence) -> float:
    """Davies-Bouldin index with Euclidean distances and mean-distance scatter.

    Returns inf when two cluster centroids coincide.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    groups = [points[labels == g] for g in np.unique(labels)]
    if len(groups) < 2:
        raise ValueError("Davies-Bouldin needs at least two clusters")
    centroids = np.array([g.mean(axis=0) for g in groups])
    scatter = np.array([np.linalg.norm(g - c, axis=1).mean() for g, c in zip(groups, centroids)])
    n = len(groups)
    worst = np.zeros(n)
    for i in range(n):
        ratios = []
        for j in range(n):
            if i == j:
                continue
            sep = np.linalg.norm(centroids[i] - centroids[j])
            ratios.append(np.inf if sep == 0.0 else (scatter[i] + scatter[j]) / sep)
        worst[i] = max(ratios)
    return float(worst.mean())
