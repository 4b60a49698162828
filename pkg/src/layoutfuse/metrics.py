"""Layout-control scoring, analytic FLOP accounting and attention heatmaps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .attention import AttentionConfig, AttentionTrace
from .layout import GridRect, box_to_grid, iou
from .tensorio import MODES, write_image

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def classify_pixels(image, signatures: Sequence, background, threshold: float | None = None) -> np.ndarray:
    """Nearest-color label per pixel: ``j`` for signature j, -1 for background.

    With ``threshold`` set, pixels farther than it from every color are
    treated as background as well.
    """
    image = np.asarray(image, dtype=np.float64)
    colors = np.vstack([np.asarray(background, dtype=np.float64)] +
                       [np.asarray(s, dtype=np.float64) for s in signatures])
    dist = np.linalg.norm(image[:, :, None, :] - colors[None, None, :, :], axis=-1)
    labels = dist.argmin(axis=-1) - 1
    if threshold is not None:
        labels[dist.min(axis=-1) > threshold] = -1
    return labels


def localize_subjects(image, signatures: Sequence, background, threshold: float | None = None) -> list[GridRect | None]:
    """Bounding rect of each subject's largest 4-connected blob (``None`` if absent)."""
    labels = classify_pixels(image, signatures, background, threshold)
    rects: list[GridRect | None] = []
    for j in range(len(signatures)):
        comp, n = ndimage.label(labels == j, structure=_FOUR_CONNECTED)
        if n == 0:
            rects.append(None)
            continue
        sizes = np.bincount(comp.reshape(-1))[1:]
        biggest = int(np.argmax(sizes)) + 1  # first label wins ties
        hs, ws = np.nonzero(comp == biggest)
        rects.append(GridRect(int(hs.min()), int(hs.max()) + 1, int(ws.min()), int(ws.max()) + 1))
    return rects


@dataclass
class LayoutScore:
    per_subject_iou: list[float]
    miou: float
    detected: list[bool]

    def to_json(self) -> dict:
        return asdict(self)


def layout_miou(predicted: Sequence[GridRect | None], targets: Sequence[GridRect]) -> LayoutScore:
    if len(predicted) != len(targets):
        raise ValueError(f"{len(predicted)} predictions for {len(targets)} targets")
    scores = [0.0 if p is None else iou(p, t) for p, t in zip(predicted, targets)]
    miou = float(np.mean(scores)) if scores else 0.0
    return LayoutScore(scores, miou, [p is not None for p in predicted])


# --------------------------------------------------------------------------
# FLOPs


@dataclass
class FlopReport:
    mode: str
    per_subject: list[int]
    image_total: int
    text_total: int
    image_exps: int
    text_exps: int
    terms: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.image_total + self.text_total

    def to_json(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        return out


def flop_count(mode: str, layout, grid: tuple[int, int], config: AttentionConfig, token_counts: Sequence[int],
               text_tokens: int = 0) -> FlopReport:
    """Multiply-adds of the attention kernels, booked as 2 per product term.

    Per subject and head: ``4 * rows * m_j * d_head`` (Q K^T plus A V), where
    ``rows`` is the subject's rect area for ``anyms`` and ``H * W`` for the
    full-grid modes.  Only the QK^T/AV products are counted; projections are
    shared by every mode and left out.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    H, W = grid
    subjects = list(getattr(layout, "subjects", layout))
    if len(token_counts) != len(subjects):
        raise ValueError("need one token count per subject")
    applied = sum(1 for l in range(config.layers) if config.apply_layers is None or l in config.apply_layers)
    per_layer = config.heads * applied
    areas = [box_to_grid(s.box, H, W).area for s in subjects]
    image_on = mode != "text-only" and subjects
    per_subject = []
    exps = 0
    for area, m in zip(areas, token_counts):
        rows = area if mode == "anyms" else H * W
        if not image_on:
            per_subject.append(0)
            continue
        per_subject.append(4 * rows * m * config.d_head * per_layer)
        exps += rows * m * per_layer
    text = 4 * H * W * text_tokens * config.d_head * config.heads * config.layers
    return FlopReport(
        mode=mode,
        per_subject=per_subject,
        image_total=sum(per_subject),
        text_total=text,
        image_exps=exps,
        text_exps=H * W * text_tokens * config.heads * config.layers,
        terms={"box_areas": areas, "tokens": list(token_counts), "d_head": config.d_head, "heads": config.heads,
               "applied_layers": applied, "grid_cells": H * W},
    )


# --------------------------------------------------------------------------
# heatmaps


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / (hi - lo)


def attention_heatmap_dump(trace: AttentionTrace | None, out_dir: str | Path) -> list[Path]:
    """Write ``attn_L{layer}_t{step}_s{subject}.ppm`` for every traced map.

    Maps are min-max normalized to [0, 1] and written as gray RGB through
    :func:`write_image`, so 0 renders as mid-gray and 1 as white.
    """
    if trace is None or not trace.mass:
        raise ValueError("no attention trace recorded; sample with trace enabled")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for (layer, step, subject), m in sorted(trace.heatmaps().items(), key=lambda kv: (kv[0][1] is None, kv[0])):
        norm = normalize_map(m)
        path = out_dir / f"attn_L{layer}_t{step}_s{subject}.ppm"
        write_image(np.repeat(norm[:, :, None], 3, axis=2), path)
        paths.append(path)
    return paths
