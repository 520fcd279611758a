"""Spatial attention vectors from bounding boxes.

Pipeline: box -> {0,255} pixel mask -> nearest-neighbor downsample to a
GxG grid -> rescale to [0,1] -> softmax. The rescale step matters: a raw
0/255 softmax puts essentially all mass inside the box, while the scaled
version keeps every in-box cell at exactly e times an out-box cell.
"""

from dataclasses import dataclass

import numpy as np

from .nn import softmax


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int
    category: tuple[str, ...] = ()

    @property
    def area(self) -> int:
        return self.w * self.h


def box_to_mask(box: BoundingBox, width: int, height: int) -> np.ndarray:
    """Binary mask (height, width) with 255 on the box pixels, 0 elsewhere."""
    if box.x < 0 or box.y < 0 or box.w < 1 or box.h < 1:
        raise ValueError(f"degenerate box {box}")
    if box.x + box.w > width or box.y + box.h > height:
        raise ValueError(f"box {box} exceeds image bounds {width}x{height}")
    mask = np.zeros((height, width), dtype=np.int64)
    mask[box.y:box.y + box.h, box.x:box.x + box.w] = 255
    return mask


def downsample_nearest(mask: np.ndarray, grid: int) -> np.ndarray:
    """Nearest-neighbor downsample to (grid, grid), pixel-center convention:
    output cell (gx, gy) samples source pixel (floor((gx+.5)W/G), floor((gy+.5)H/G)).
    Aspect ratio is not preserved."""
    if grid < 1:
        raise ValueError("grid side must be >= 1")
    h, w = mask.shape
    xs = ((np.arange(grid) + 0.5) * w / grid).astype(np.int64)
    ys = ((np.arange(grid) + 0.5) * h / grid).astype(np.int64)
    return mask[np.ix_(ys, xs)]


def mask_to_attention(grid: np.ndarray, interpolate: bool = True) -> np.ndarray:
    """Flatten a {0,255} grid row-major, map [0,255] -> [0,1], softmax.

    interpolate=False skips the [0,1] rescale (softmax over raw 0/255);
    kept as a regression handle for the failure mode where nearly all
    mass lands inside the box.
    """
    flat = grid.reshape(-1).astype(np.float64)
    if interpolate:
        flat = flat / 255.0
    return softmax(flat)


def uniform_attention(length: int) -> np.ndarray:
    if length < 1:
        raise ValueError("attention length must be >= 1")
    return np.full(length, 1.0 / length)


def upsample_attention(alpha: np.ndarray, width: int, height: int) -> np.ndarray:
    """Paint each grid cell as a constant block, normalized by max(alpha)
    into [0,1]. alpha has length G*G."""
    length = alpha.shape[0]
    grid = int(round(length ** 0.5))
    if grid * grid != length:
        raise ValueError(f"attention length {length} is not a square")
    if width < grid or height < grid:
        raise ValueError("target dims must be at least the grid side")
    cells = alpha.reshape(grid, grid) / np.max(alpha)
    ys = (np.arange(height) * grid // height).clip(max=grid - 1)
    xs = (np.arange(width) * grid // width).clip(max=grid - 1)
    return cells[np.ix_(ys, xs)]


def check_attention(alpha: np.ndarray, atol: float = 1e-9, what: str = "attention vector"):
    """Enforce the simplex invariant: strictly positive, sums to 1."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0.0):
        raise ValueError(f"{what} has non-positive entries")
    if abs(float(alpha.sum()) - 1.0) > atol:
        raise ValueError(f"{what} does not sum to 1 (got {alpha.sum()!r})")
    return alpha


def box_attention(box: BoundingBox, width: int, height: int, grid: int) -> np.ndarray:
    """Full pipeline: mask, downsample, rescale, softmax."""
    return mask_to_attention(downsample_nearest(box_to_mask(box, width, height), grid))
