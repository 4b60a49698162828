"""Crop-and-merge vs full masked attention: wall-clock and analytic FLOPs."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .adapter import AdapterWeights, SubjectCondition
from .attention import (AttentionConfig, BlockWeights, local_image_cross_attention,
                        masked_sum_image_cross_attention)
from .layout import GridRect, build_region_assignment, masks_from_layout
from .metrics import flop_count


def coverage_layout(rng: np.random.Generator, grid: int, n: int, coverage: float) -> list[GridRect]:
    """``n`` disjoint rects whose areas add up to ``round(coverage * grid**2)`` when that is reachable.

    The canvas is cut into ``n`` column strips (randomly ordered).  Each rect
    sits in its own strip at a random vertical offset; its height and width
    (up to the strip's) are chosen so its area is as close as possible to a
    proportional share of what is left, while leaving the later strips
    enough room to reach the target.
    """
    if not 0.0 < coverage <= 1.0:
        raise ValueError(f"coverage must lie in (0, 1], got {coverage}")
    if not 1 <= n <= grid:
        raise ValueError(f"need 1 <= subjects <= grid ({grid}), got {n}")
    widths = [grid // n + (1 if j < grid % n else 0) for j in range(n)]
    widths = [widths[j] for j in rng.permutation(n)]
    remaining = round(coverage * grid * grid)
    rects = []
    left = 0
    for j, strip in enumerate(widths):
        later = sum(widths[j + 1:])
        # Later strips hold between one cell each and their full area.
        lo = remaining - grid * later
        hi = remaining - (n - 1 - j)
        share = remaining * strip / (strip + later)

        def cost(hw):
            area = hw[0] * hw[1]
            return (max(lo - area, 0, area - hi), abs(area - share), -hw[1])

        h, w = min(((hh, ww) for ww in range(1, strip + 1) for hh in range(1, grid + 1)), key=cost)
        top = int(rng.integers(0, grid - h + 1))
        rects.append(GridRect(top, top + h, left, left + w))
        remaining -= h * w
        left += strip
    return rects


def rect_to_box(r: GridRect, grid: int) -> tuple[float, float, float, float]:
    return (r.w_s / grid, r.h_s / grid, r.w_e / grid, r.h_e / grid)


@dataclass
class BenchResult:
    grid: int
    subjects: int
    coverage: float
    realized_coverage: list[float]
    anyms_seconds: list[float]
    masked_seconds: list[float]
    anyms_flops: list[int]
    masked_flops: list[int]

    @property
    def anyms_median(self) -> float:
        return statistics.median(self.anyms_seconds)

    @property
    def masked_median(self) -> float:
        return statistics.median(self.masked_seconds)

    @property
    def flop_ratio(self) -> float:
        return sum(self.anyms_flops) / sum(self.masked_flops)

    def to_json(self) -> dict:
        return {
            "grid": self.grid,
            "subjects": self.subjects,
            "coverage": self.coverage,
            "realized_coverage": self.realized_coverage,
            "anyms_median_s": self.anyms_median,
            "masked_sum_median_s": self.masked_median,
            "time_ratio": self.anyms_median / self.masked_median,
            "flop_ratio": self.flop_ratio,
            "anyms_flops": self.anyms_flops,
            "masked_sum_flops": self.masked_flops,
        }


def run_benchmark(grid: int = 64, subjects: int = 4, coverage: float = 0.25, repeat: int = 20, seed: int = 0,
                  tokens: int = 4, d_head: int = 16, heads: int = 2, d_cond: int = 16) -> BenchResult:
    """Time both image streams on seeded random tensors, one layout per repeat."""
    rng = np.random.default_rng(seed)
    config = AttentionConfig(layers=1, heads=heads, d_model=heads * d_head, d_head=d_head, d_cond=d_cond)
    d_model = config.d_model
    result = BenchResult(grid, subjects, coverage, [], [], [], [], [])
    for _ in range(repeat):
        rects = coverage_layout(rng, grid, subjects, coverage)
        conds = [SubjectCondition(f"s{j}", rng.standard_normal((tokens, d_cond)), rect_to_box(r, grid), 0)
                 for j, r in enumerate(rects)]
        weights = BlockWeights(rng.standard_normal((1, heads, d_model, d_head)) / np.sqrt(d_model),
                               rng.standard_normal((1, heads, d_cond, d_head)),
                               rng.standard_normal((1, heads, d_cond, d_head)),
                               np.eye(d_model)[None])
        adapter = AdapterWeights(rng.standard_normal((1, heads, d_cond, d_head)),
                                 rng.standard_normal((1, heads, d_cond, d_head)))
        Z = rng.standard_normal((grid * grid, d_model))
        assignment = build_region_assignment(conds, grid, grid)
        masks = masks_from_layout(conds, grid, grid)

        t0 = time.perf_counter()
        local_image_cross_attention(Z, conds, assignment, 0, weights, adapter)
        t1 = time.perf_counter()
        masked_sum_image_cross_attention(Z, conds, masks, 0, weights, adapter)
        t2 = time.perf_counter()

        result.anyms_seconds.append(t1 - t0)
        result.masked_seconds.append(t2 - t1)
        result.realized_coverage.append(sum(r.area for r in rects) / grid**2)
        counts = [tokens] * subjects
        result.anyms_flops.append(flop_count("anyms", conds, (grid, grid), config, counts).image_total)
        result.masked_flops.append(flop_count("masked-sum", conds, (grid, grid), config, counts).image_total)
    return result
