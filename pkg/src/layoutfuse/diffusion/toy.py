"""Synthetic single-subject canvases and the toy trainer.

Each training image is a gray canvas carrying one axis-aligned colored
rectangle.  The image stream runs in ``global-sum`` mode over the whole
canvas with a single subject, so the model never sees a layout: placing
several subjects at inference time is left entirely to the attention modes.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..adapter import SubjectCondition
from ..attention import AttentionConfig
from ..errors import NumericError, WeightsError
from ..layout import GridRect
from ..tensorio import LayoutSpec, SubjectEntry
from .model import EmbeddingTables, ToyDenoiser, TrainExample, init_model, rec_loss
from .schedule import Schedule, make_schedule

log = logging.getLogger(__name__)

PALETTE = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "cyan": (-1.0, 1.0, 1.0),
    "magenta": (1.0, -1.0, 1.0),
}
BACKGROUND = (0.0, 0.0, 0.0)


@dataclass
class ToyDataConfig:
    grid: int = 16
    palette: tuple[str, ...] = tuple(PALETTE)
    blob_min: int = 12
    blob_max: int = 16
    scenes: int = 1
    prompt_tokens: int = 2
    size: int = 512
    holdout: int = 64


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 32
    lr: float = 0.15
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_cond: int = 16
    mlp_hidden: int = 64


def make_canvas(color, rect: GridRect, grid: int, background=BACKGROUND) -> np.ndarray:
    img = np.empty((grid, grid, 3))
    img[...] = background
    img[rect.h_s : rect.h_e, rect.w_s : rect.w_e] = color
    return img


def random_rect(rng: np.random.Generator, grid: int, lo: int, hi: int) -> GridRect:
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    top = int(rng.integers(0, grid - h + 1))
    left = int(rng.integers(0, grid - w + 1))
    return GridRect(top, top + h, left, left + w)


@dataclass
class Sample:
    canvas: np.ndarray
    subject: int
    scene: int
    rect: GridRect


def synthetic_dataset(cfg: ToyDataConfig, n: int, rng: np.random.Generator) -> list[Sample]:
    colors = [PALETTE[name] for name in cfg.palette]
    out = []
    for _ in range(n):
        k = int(rng.integers(len(colors)))
        rect = random_rect(rng, cfg.grid, cfg.blob_min, cfg.blob_max)
        scene = int(rng.integers(cfg.scenes))
        out.append(Sample(make_canvas(colors[k], rect, cfg.grid), k, scene, rect))
    return out


def _examples(samples: Sequence[Sample], rng: np.random.Generator, T: int) -> list[TrainExample]:
    return [
        TrainExample(s.canvas, int(rng.integers(1, T + 1)), rng.standard_normal(s.canvas.shape), s.scene, [s.subject])
        for s in samples
    ]


@dataclass
class ToyAssets:
    """Everything a toy generation needs, persisted in one container."""

    model: ToyDenoiser
    tables: EmbeddingTables
    palette: tuple[str, ...]
    schedule: Schedule
    loss_curve: list[float] = field(default_factory=list)
    holdout_loss: tuple[float, float] | None = None  # (initial, final)

    def color(self, name: str) -> np.ndarray:
        return np.asarray(PALETTE[name])

    def subject_embedding(self, name: str) -> np.ndarray:
        return self.tables.subject[self.palette.index(name)][None, :]

    def to_entries(self) -> dict[str, np.ndarray]:
        out = self.model.to_entries()
        for k in range(self.tables.scene.shape[0]):
            out[f"scene.{k}"] = self.tables.scene[k]
        for k, name in enumerate(self.palette):
            out[f"subject.{name}"] = self.tables.subject[k][None, :]
        for name in self.palette:
            out[f"palette.{name}"] = np.asarray(PALETTE[name])
        out["palette.background"] = np.asarray(BACKGROUND)
        betas = self.schedule.betas
        out["meta.schedule"] = np.array([self.schedule.T, betas[0], betas[-1]], dtype=np.float64)
        return out

    @classmethod
    def from_container(cls, container: Mapping[str, np.ndarray]) -> "ToyAssets":
        model = ToyDenoiser.from_container(container)
        scenes = sorted(int(m.group(1)) for m in map(re.compile(r"scene\.(\d+)$").match, container) if m)
        names = [m.group(1) for m in map(re.compile(r"subject\.(.+)$").match, container) if m]
        if not scenes or not names:
            raise WeightsError("container lacks scene/subject embedding tables")
        scene = np.stack([np.asarray(container[f"scene.{k}"], dtype=np.float64) for k in scenes])
        subject = np.stack([np.asarray(container[f"subject.{n}"], dtype=np.float64)[0] for n in names])
        schedule = schedule_from_container(container, model.T)
        return cls(model, EmbeddingTables(scene, subject), tuple(names), schedule)

    def conditions(self, subjects: Sequence[tuple[str, Sequence[float], int]]) -> list[SubjectCondition]:
        return [SubjectCondition(name, self.subject_embedding(name), tuple(box), prio) for name, box, prio in subjects]

    def layout_spec(self, subjects: Sequence[tuple[str, Sequence[float], int]], seed: int = 0, steps: int = 50,
                    mode: str = "anyms", scene: int = 0, grid: int = 16, **kw) -> LayoutSpec:
        entries = [SubjectEntry(name, f"subject.{name}", tuple(box), prio, self.subject_embedding(name))
                   for name, box, prio in subjects]
        return LayoutSpec((grid, grid, self.model.channels), f"scene.{scene}", self.tables.scene[scene],
                          entries, seed, steps, mode, **kw)


def schedule_from_container(container: Mapping[str, np.ndarray], T: int) -> Schedule:
    if "meta.schedule" in container:
        t, lo, hi = (float(v) for v in container["meta.schedule"])
        return make_schedule(int(t), lo, hi)
    return make_schedule(T)


def train_toy(data: ToyDataConfig | None = None, hp: TrainConfig | None = None, seed: int = 0) -> ToyAssets:
    """Fit the toy denoiser, adapter and embedding tables by plain gradient descent."""
    data = data or ToyDataConfig()
    hp = hp or TrainConfig()
    s_init, s_data, s_noise, s_hold = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))

    config = AttentionConfig(layers=hp.layers, heads=hp.heads, d_model=hp.d_model,
                             d_head=hp.d_model // hp.heads, d_cond=hp.d_cond)
    model = init_model(config, channels=3, T=hp.T, mlp_hidden=hp.mlp_hidden, seed=int(s_init.integers(2**63)))
    tables = EmbeddingTables(
        s_init.standard_normal((data.scenes, data.prompt_tokens, hp.d_cond)),
        s_init.standard_normal((len(data.palette), hp.d_cond)),
    )
    schedule = make_schedule(hp.T, hp.beta_start, hp.beta_end)

    train_set = synthetic_dataset(data, data.size, s_data)
    holdout = _examples(synthetic_dataset(data, data.holdout, s_hold), s_hold, hp.T)
    initial, _ = rec_loss(model, holdout, tables, schedule)
    log.info("held-out loss at init: %.5f", initial)

    params = dict(model.params)
    params.update(tables.as_params())
    curve = []
    for epoch in range(hp.epochs):
        order = s_data.permutation(len(train_set))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(order), hp.batch_size):
            batch = _examples([train_set[i] for i in order[start : start + hp.batch_size]], s_noise, hp.T)
            try:
                loss, grads = rec_loss(model, batch, tables, schedule)
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at epoch {epoch}, batch {batches}; recent losses {curve[-5:]}: {exc}"
                ) from exc
            for name, g in grads.items():
                params[name] -= hp.lr * g
            epoch_loss += loss
            batches += 1
        curve.append(epoch_loss / max(batches, 1))
        log.info("epoch %d loss %.5f", epoch, curve[-1])

    final, _ = rec_loss(model, holdout, tables, schedule)
    log.info("held-out loss after training: %.5f", final)
    return ToyAssets(model, tables, tuple(data.palette), schedule, curve, (initial, final))


def config_dict(data: ToyDataConfig, hp: TrainConfig) -> dict:
    return {"data": asdict(data), "train": asdict(hp)}
