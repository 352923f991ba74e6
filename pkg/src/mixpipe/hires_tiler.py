"""Global view plus base-resolution sub-images for high-resolution inputs.

An input of side ``input_res`` is split into a ``k x k`` grid with
``k = input_res // base_res`` so that every cell is at least ``base_res``
wide.  448 -> 2x2 corner crops of 224, 762 -> 3x3 cells of 254.  If
``input_res`` is not a multiple of ``k`` the input is first resampled to the
largest multiple below it (the working canvas).  Each cell is resampled to
``base_res``.  The global view always comes first and is computed from the
original input.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .images import ImageTensor


@dataclass(frozen=True)
class View:
    kind: str
    source_rect: tuple[int, int, int, int]
    resample_to: int


@dataclass(frozen=True)
class TilingPlan:
    input_res: int
    base_res: int
    canvas_res: int
    views: tuple[View, ...]
    tokens_per_group: int = 1

    @property
    def grid(self) -> int:
        return int(round(np.sqrt(len(self.views) - 1))) if len(self.views) > 1 else 0

    def crops(self) -> tuple[View, ...]:
        return self.views[1:]


def make_plan(input_res: int, base_res: int, tokens_per_group: int = 1) -> TilingPlan:
    if isinstance(input_res, tuple):
        h, w = input_res
        if h != w:
            raise ValueError(f"make_plan: input must be square, got {h}x{w}")
        input_res = h
    if base_res < 1 or input_res < base_res:
        raise ValueError(f"make_plan: input_res {input_res} smaller than base_res {base_res}")
    views = [View("global", (0, 0, input_res, input_res), base_res)]
    k = input_res // base_res
    canvas = input_res
    if k >= 2:
        cell = input_res // k
        canvas = cell * k
        for r in range(k):
            for c in range(k):
                views.append(View("crop", (c * cell, r * cell, cell, cell), base_res))
    return TilingPlan(input_res, base_res, canvas, tuple(views), tokens_per_group)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, clamped to the edge
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resample(img: ImageTensor, target_res: int | tuple[int, int]) -> ImageTensor:
    """Bilinear resize; an equal-size request returns an exact copy."""
    th, tw = (target_res, target_res) if isinstance(target_res, int) else target_res
    if th < 1 or tw < 1:
        raise ValueError(f"resample: target size must be >= 1, got {th}x{tw}")
    px = img.pixels
    if (th, tw) == px.shape[:2]:
        return ImageTensor(px.copy())
    ylo, yhi, fy = _axis_weights(px.shape[0], th)
    xlo, xhi, fx = _axis_weights(px.shape[1], tw)
    rows = px[ylo] * (1.0 - fy)[:, None, None] + px[yhi] * fy[:, None, None]
    out = rows[:, xlo] * (1.0 - fx)[None, :, None] + rows[:, xhi] * fx[None, :, None]
    return ImageTensor(np.clip(out, 0.0, 1.0))


def apply_plan(img: ImageTensor, plan: TilingPlan) -> list[ImageTensor]:
    if img.height != plan.input_res or img.width != plan.input_res:
        raise ValueError(f"apply_plan: image is {img.height}x{img.width}, plan expects {plan.input_res}")
    out = [resample(img, plan.base_res)]
    if len(plan.views) == 1:
        return out
    canvas = img if plan.canvas_res == plan.input_res else resample(img, plan.canvas_res)
    for v in plan.crops():
        x, y, w, h = v.source_rect
        out.append(resample(ImageTensor(canvas.pixels[y:y + h, x:x + w]), v.resample_to))
    return out


def total_visual_tokens(plan: TilingPlan, tokens_per_group: int | None = None) -> int:
    tpg = plan.tokens_per_group if tokens_per_group is None else tokens_per_group
    if tpg < 1:
        raise ValueError("tokens_per_group must be positive")
    return len(plan.views) * tpg


def write_manifest(plan: TilingPlan, path: str | Path) -> None:
    """One view per line: ``order kind x y w h``."""
    lines = [f"# input_res={plan.input_res} base_res={plan.base_res} canvas_res={plan.canvas_res}"]
    for i, v in enumerate(plan.views):
        x, y, w, h = v.source_rect
        lines.append(f"{i} {v.kind} {x} {y} {w} {h}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> TilingPlan:
    text = Path(path).read_text().splitlines()
    head = dict(kv.split("=") for kv in text[0].lstrip("# ").split())
    views = []
    for i, line in enumerate(text[1:]):
        order, kind, *rect = line.split()
        if int(order) != i:
            raise ValueError(f"{path}: view order {order} out of sequence at line {i + 2}")
        views.append(View(kind, tuple(int(r) for r in rect), int(head["base_res"])))
    return TilingPlan(int(head["input_res"]), int(head["base_res"]), int(head["canvas_res"]), tuple(views))
