"""Boxes, patch grids, IoU, and the scene-adaptive binary masks over the token grid.

All coordinates are normalized to [0, 1] with y increasing downward. Patch
grids are row-major: token index n maps to (row, col) = (n // cols, n % cols).
Masks are numpy bool arrays of length rows * cols.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized image coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"box coordinate {name}={v} outside [0, 1]")
        if not self.x_min < self.x_max:
            raise ValueError(f"degenerate box: x_min={self.x_min} >= x_max={self.x_max}")
        if not self.y_min < self.y_max:
            raise ValueError(f"degenerate box: y_min={self.y_min} >= y_max={self.y_max}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class PatchGrid:
    """Row-major grid of rows x cols square-ish patches tiling the unit image."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must have positive dims, got {self.rows}x{self.cols}")

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols

    def index_of(self, row: int, col: int) -> int:
        return row * self.cols + col

    def patch_bounds(self, n: int) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max) of patch n."""
        row, col = divmod(n, self.cols)
        return (col / self.cols, row / self.rows, (col + 1) / self.cols, (row + 1) / self.rows)

    def patch_containing(self, x: float, y: float) -> int:
        """Index of the patch containing (x, y); exact-boundary ties go to the lower index."""
        col = _axis_cell(x, self.cols)
        row = _axis_cell(y, self.rows)
        return self.index_of(row, col)


def _axis_cell(coord: float, cells: int) -> int:
    t = coord * cells
    cell = math.floor(t)
    if cell == t and cell > 0:
        cell -= 1
    return min(max(cell, 0), cells - 1)


@dataclass(frozen=True)
class MaskSet:
    """Per-instance region and surrounding masks plus the all-ones global mask.

    instance and surrounding are (K, N) bool arrays; global_mask is (N,) all
    ones. For every i, surrounding[i] & instance[i] is all zero.
    """

    grid: PatchGrid
    instance: np.ndarray
    surrounding: np.ndarray
    global_mask: np.ndarray

    def __post_init__(self):
        n = self.grid.num_tokens
        if self.instance.ndim != 2 or self.instance.shape[1] != n:
            raise ValueError(f"instance masks must be (K, {n}), got {self.instance.shape}")
        if self.surrounding.shape != self.instance.shape:
            raise ValueError("surrounding masks must match instance mask shape")
        if self.instance.shape[0] < 1:
            raise ValueError("mask set needs at least one instance")
        if not np.all(self.global_mask):
            raise ValueError("global mask must be all ones")

    @property
    def num_instances(self) -> int:
        return int(self.instance.shape[0])


def instance_mask(box: Box, grid: PatchGrid, overlap_threshold: float = 0.5) -> np.ndarray:
    """Binary mask of patches the box covers by at least `overlap_threshold` of the patch area.

    Never returns an all-zero mask: when no patch clears the threshold, the
    patch containing the box center is set instead.
    """
    if not 0.0 < overlap_threshold <= 1.0:
        raise ValueError(f"overlap_threshold must be in (0, 1], got {overlap_threshold}")
    mask = np.zeros(grid.num_tokens, dtype=bool)
    for n in range(grid.num_tokens):
        px0, py0, px1, py1 = grid.patch_bounds(n)
        ox = min(box.x_max, px1) - max(box.x_min, px0)
        oy = min(box.y_max, py1) - max(box.y_min, py0)
        if ox <= 0.0 or oy <= 0.0:
            continue
        if ox * oy >= overlap_threshold * (px1 - px0) * (py1 - py0):
            mask[n] = True
    if not mask.any():
        cx, cy = box.center
        mask[grid.patch_containing(cx, cy)] = True
    return mask


def surrounding_mask(instance_masks: np.ndarray, i: int) -> np.ndarray:
    """Union of all other instances' masks with instance i's own positions cleared.

    The result must be nonempty (attention needs keys) and, for multi-instance
    scenes, disjoint from the instance's own mask. When the union minus the
    own mask comes out empty (K = 1, or every other instance hides inside this
    one), the fallback is the complement of the own mask; a lone instance or
    one covering the whole grid gets the all-ones mask instead.
    """
    k = instance_masks.shape[0]
    if not 0 <= i < k:
        raise IndexError(f"instance index {i} out of range for {k} masks")
    others = np.zeros(instance_masks.shape[1], dtype=bool)
    for j in range(k):
        if j != i:
            others |= instance_masks[j]
    result = others & ~instance_masks[i]
    if result.any():
        return result
    if k > 1:
        complement = ~instance_masks[i]
        if complement.any():
            return complement
    return np.ones(instance_masks.shape[1], dtype=bool)


def build_mask_set(boxes: list[Box], grid: PatchGrid, overlap_threshold: float = 0.5) -> MaskSet:
    """Instance, surrounding, and global masks for a list of detected boxes."""
    if not boxes:
        raise ValueError("mask set needs at least one box")
    inst = np.stack([instance_mask(b, grid, overlap_threshold) for b in boxes])
    surr = np.stack([surrounding_mask(inst, i) for i in range(len(boxes))])
    return MaskSet(
        grid=grid,
        instance=inst,
        surrounding=surr,
        global_mask=np.ones(grid.num_tokens, dtype=bool),
    )


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ox = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    oy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ox <= 0.0 or oy <= 0.0:
        return 0.0
    inter = ox * oy
    return inter / (a.area + b.area - inter)


def box_iou_xyxy(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two [x0, y0, x1, y1] arrays (no validity checks, for hot eval loops)."""
    ox = min(a[2], b[2]) - max(a[0], b[0])
    oy = min(a[3], b[3]) - max(a[1], b[1])
    if ox <= 0.0 or oy <= 0.0:
        return 0.0
    inter = ox * oy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))
