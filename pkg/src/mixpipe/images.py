"""RGB images held as float arrays in [0, 1], plus binary P6 pixmap I/O."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(eq=False)
class ImageTensor:
    """Channel-last RGB image; ``pixels`` has shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must have shape (h, w, 3), got {px.shape}")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image values must be finite and lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 3

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view."""
        return self.pixels.reshape(-1)

    @property
    def is_square(self) -> bool:
        return self.height == self.width

    @classmethod
    def blank(cls, height: int, width: int | None = None, value: float = 0.0) -> "ImageTensor":
        return cls(np.full((height, width or height, 3), value))

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageTensor) and np.array_equal(self.pixels, other.pixels)


_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def write_ppm(path: str | Path, img: ImageTensor) -> None:
    raw = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raw.tobytes())


def read_ppm(path: str | Path) -> ImageTensor:
    blob = Path(path).read_bytes()
    m = _HEADER.match(blob)
    if m is None:
        raise ValueError(f"{path}: not a binary P6 pixmap")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    body = blob[m.end():m.end() + need]
    if len(body) != need:
        raise ValueError(f"{path}: truncated pixel data at byte {m.end() + len(body)}, expected {need} bytes")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / maxval
    return ImageTensor(px)
