"""Grayscale PGM images of density fields, one pixel per element."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def density_image(grid: np.ndarray) -> np.ndarray:
    """(nely, nelx) densities in [0, 1] -> uint8 pixels, 0 solid and 255 void."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D density grid, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)) or grid.min() < 0 or grid.max() > 1:
        raise ValueError("densities must be finite and within [0, 1]")
    return np.rint(255.0 * (1.0 - grid)).astype(np.uint8)


def write_pgm(pixels: np.ndarray, path: str | Path) -> None:
    height, width = pixels.shape
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode() + pixels.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", raw)
    if not m:
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    width, height = int(m[1]), int(m[2])
    return np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=m.end()).reshape(height, width)
