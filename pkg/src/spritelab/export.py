"""Episode media: PNG frames with white action arrows, an animated GIF and a JSON-lines log."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import env

UPSCALE = 4
ARROW_COLOR = (255, 255, 255)
FRAME_MS = 400


def arrow_endpoints(action: Sequence[float], size: int) -> tuple[tuple[float, float], tuple[float, float]]:
    """Click point and the point the clicked sprite would move to (noise free), in pixels."""
    a = env.as_action(action)
    delta = env.motion_delta(a)
    start = (a[0] * size, a[1] * size)
    end = ((a[0] + delta[0]) * size, (a[1] + delta[1]) * size)
    return start, end


def draw_arrow(img: Image.Image, start, end, color=ARROW_COLOR, width: int = 2, head: float = 6.0):
    draw = ImageDraw.Draw(img)
    draw.line([start, end], fill=color, width=width)
    v = np.subtract(end, start)
    length = float(np.hypot(*v))
    if length > 1e-9:
        u = v / length
        n = np.array([-u[1], u[0]])
        tip = np.asarray(end)
        base = tip - u * min(head, length)
        left, right = base + n * head / 2, base - n * head / 2
        draw.polygon([tuple(tip), tuple(left), tuple(right)], fill=color)
    draw.point([tuple(np.round(start)), tuple(np.round(end))], fill=color)


def frame_image(sprites: Sequence[env.SpriteState], action=None, upscale: int = UPSCALE) -> Image.Image:
    rgb = env.render(sprites)
    img = Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8), "RGB")
    size = env.IMAGE_SIZE * upscale
    img = img.resize((size, size), Image.NEAREST)
    if action is not None:
        draw_arrow(img, *arrow_endpoints(action, size))
    return img


def export_episode(trajectory: Sequence[dict], out_dir, upscale: int = UPSCALE, name: str = "episode") -> dict:
    """Write `<name>_<t>.png` per step, `<name>.gif` and `<name>.jsonl`.

    Each trajectory entry needs `sprites` (list of sprite dicts, before the
    action) and `action`; any other keys go to the log unchanged.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames, pngs = [], []
    for i, step in enumerate(trajectory):
        sprites = [env.SpriteState.from_dict(s) for s in step["sprites"]]
        img = frame_image(sprites, step["action"], upscale)
        path = out / f"{name}_{i:03d}.png"
        img.save(path, format="PNG")
        frames.append(img)
        pngs.append(path)
    gif = out / f"{name}.gif"
    if frames:
        frames[0].save(gif, format="GIF", save_all=True, append_images=frames[1:], duration=FRAME_MS, loop=0)
    log_path = out / f"{name}.jsonl"
    with open(log_path, "w") as f:
        for step in trajectory:
            f.write(json.dumps(step, sort_keys=True) + "\n")
    return {"png": pngs, "gif": gif if frames else None, "jsonl": log_path}
