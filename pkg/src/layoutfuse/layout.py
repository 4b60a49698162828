"""Bounding-box geometry on attention grids."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensorio import check_box

# Absorbs float noise such as 0.3 * 10 == 3.0000000000000004 before floor/ceil.
_SNAP = 1e-9


@dataclass(frozen=True)
class GridRect:
    """End-exclusive rectangle ``[h_s, h_e) x [w_s, w_e)`` on an H x W grid."""

    h_s: int
    h_e: int
    w_s: int
    w_e: int

    @property
    def area(self) -> int:
        return (self.h_e - self.h_s) * (self.w_e - self.w_s)

    def flat_indices(self, width: int) -> np.ndarray:
        """Row-major indices of the covered cells in an (H*W)-row matrix."""
        rows = np.arange(self.h_s, self.h_e)[:, None] * width
        return (rows + np.arange(self.w_s, self.w_e)[None, :]).reshape(-1)

    def contains(self, h: int, w: int) -> bool:
        return self.h_s <= h < self.h_e and self.w_s <= w < self.w_e

    def as_list(self) -> list[int]:
        return [self.h_s, self.h_e, self.w_s, self.w_e]


@dataclass
class RegionAssignment:
    """Per-pixel winner map; ``winner[h, w] == -1`` marks uncovered pixels."""

    winner: np.ndarray
    rects: list[GridRect]

    @property
    def shape(self) -> tuple[int, int]:
        return self.winner.shape

    def winner_indices(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.winner.reshape(-1) == j)


def box_to_grid(box, H: int, W: int) -> GridRect:
    """Map a normalized ``[x0, y0, x1, y1]`` box onto the smallest covering rect."""
    x0, y0, x1, y1 = check_box(box)
    h_s = min(max(math.floor(y0 * H + _SNAP), 0), H)
    h_e = min(max(math.ceil(y1 * H - _SNAP), 0), H)
    w_s = min(max(math.floor(x0 * W + _SNAP), 0), W)
    w_e = min(max(math.ceil(x1 * W - _SNAP), 0), W)
    if not (h_s < h_e and w_s < w_e):
        raise ValueError(f"box {box} maps to an empty rect on a {H}x{W} grid")
    return GridRect(h_s, h_e, w_s, w_e)


def _subjects(layout) -> Sequence:
    return getattr(layout, "subjects", layout)


def build_region_assignment(layout, H: int, W: int) -> RegionAssignment:
    """Resolve overlaps: highest priority wins, ties go to the smaller index.

    ``layout`` is a :class:`LayoutSpec` or any sequence of objects with
    ``box`` and ``priority`` attributes.
    """
    subjects = _subjects(layout)
    rects = [box_to_grid(s.box, H, W) for s in subjects]
    winner = np.full((H, W), -1, dtype=np.int64)
    # Paint lowest rank first so the final paint is the winner.
    order = sorted(range(len(subjects)), key=lambda j: (subjects[j].priority, -j))
    for j in order:
        r = rects[j]
        winner[r.h_s : r.h_e, r.w_s : r.w_e] = j
    return RegionAssignment(winner, rects)


def masks_from_layout(layout, H: int, W: int) -> list[np.ndarray]:
    """Raw per-box indicator masks; overlaps are deliberately left unresolved."""
    masks = []
    for s in _subjects(layout):
        r = box_to_grid(s.box, H, W)
        m = np.zeros((H, W), dtype=bool)
        m[r.h_s : r.h_e, r.w_s : r.w_e] = True
        masks.append(m)
    return masks


def intersection(a: GridRect, b: GridRect) -> int:
    dh = min(a.h_e, b.h_e) - max(a.h_s, b.h_s)
    dw = min(a.w_e, b.w_e) - max(a.w_s, b.w_s)
    return max(dh, 0) * max(dw, 0)


def iou(a: GridRect, b: GridRect) -> float:
    inter = intersection(a, b)
    return inter / (a.area + b.area - inter)
