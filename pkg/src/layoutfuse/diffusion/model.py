"""The toy noise predictor and its reconstruction loss with analytic gradients.

Architecture, per pixel row of the flattened H*W latent::

    h = z W_in + b_in + time[t]
    repeat L times:
        h = h + decoupled_block(h)
        h = h + silu(h W1 + b1) W2 + b2
    eps = h W_out + b_out

There is no self-attention and no positional encoding; any spatial structure
in the output comes from where the image stream delivers subject features.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from ..adapter import AdapterWeights, SubjectCondition
from ..attention import (AttentionConfig, AttentionTrace, BlockWeights, ImagePlan, block_backward,
                         block_forward, build_plan)
from ..errors import NumericError, WeightsError
from .schedule import Schedule, forward_diffuse, make_schedule


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class ToyDenoiser:
    config: AttentionConfig
    params: dict[str, np.ndarray]

    @property
    def channels(self) -> int:
        return self.params["embed.in.w"].shape[0]

    @property
    def T(self) -> int:
        return self.params["embed.time"].shape[0]

    @property
    def mlp_hidden(self) -> int:
        return self.params["mlp.w1"].shape[2]

    @property
    def block(self) -> BlockWeights:
        p = self.params
        return BlockWeights(p["block.wq"], p["block.wk"], p["block.wv"], p["block.wo"])

    @property
    def adapter(self) -> AdapterWeights:
        return AdapterWeights(self.params["adapter.wk"], self.params["adapter.wv"])

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "ToyDenoiser":
        return ToyDenoiser(self.config, {k: v.copy() for k, v in self.params.items()})

    def to_entries(self) -> dict[str, np.ndarray]:
        p = self.params
        out = {
            "embed.in.w": p["embed.in.w"],
            "embed.in.b": p["embed.in.b"],
            "embed.time": p["embed.time"],
        }
        out.update(self.block.to_entries())
        out.update(self.adapter.to_entries())
        for l in range(self.config.layers):
            for name in ("w1", "b1", "w2", "b2"):
                out[f"mlp.layer{l}.{name}"] = p[f"mlp.{name}"][l]
        out["embed.out.w"] = p["embed.out.w"]
        out["embed.out.b"] = p["embed.out.b"]
        return out

    @classmethod
    def from_container(cls, container: Mapping[str, np.ndarray], image_scale: float = 1.0) -> "ToyDenoiser":
        def get(name):
            if name not in container:
                raise WeightsError(f"missing tensor {name}")
            return np.asarray(container[name], dtype=np.float64)

        block = BlockWeights.from_container(container)
        adapter = AdapterWeights.from_container(container)
        layers, heads, d_model, d_head = block.wq.shape
        config = AttentionConfig(layers=layers, heads=heads, d_model=d_model, d_head=d_head,
                                 d_cond=block.wk.shape[2], image_scale=image_scale)
        if adapter.wk.shape[:2] != (layers, heads) or adapter.d_cond != config.d_cond:
            raise WeightsError(f"adapter weights {adapter.wk.shape} do not match blocks {block.wk.shape}")
        params = {
            "embed.in.w": get("embed.in.w"),
            "embed.in.b": get("embed.in.b"),
            "embed.time": get("embed.time"),
            "block.wq": block.wq,
            "block.wk": block.wk,
            "block.wv": block.wv,
            "block.wo": block.wo,
            "adapter.wk": adapter.wk,
            "adapter.wv": adapter.wv,
        }
        for name in ("w1", "b1", "w2", "b2"):
            params[f"mlp.{name}"] = np.stack([get(f"mlp.layer{l}.{name}") for l in range(layers)])
        params["embed.out.w"] = get("embed.out.w")
        params["embed.out.b"] = get("embed.out.b")
        return cls(config, params)


def sinusoidal_table(T: int, dim: int) -> np.ndarray:
    t = np.arange(1, T + 1, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    table = np.zeros((T, dim))
    table[:, :half] = np.sin(t * freqs)
    table[:, half : 2 * half] = np.cos(t * freqs)
    return table


def init_model(config: AttentionConfig, channels: int = 3, T: int = 200, mlp_hidden: int = 64,
               seed: int = 0) -> ToyDenoiser:
    """Seeded initialization; the time table starts from sinusoidal features."""
    rng = np.random.default_rng(seed)
    L, Hh, D, dh, dc = config.layers, config.heads, config.d_model, config.d_head, config.d_cond

    def normal(shape, fan_in, gain=1.0):
        return rng.standard_normal(shape) * (gain / math.sqrt(fan_in))

    params = {
        "embed.in.w": normal((channels, D), channels),
        "embed.in.b": np.zeros(D),
        "embed.time": sinusoidal_table(T, D),
        "block.wq": normal((L, Hh, D, dh), D),
        "block.wk": normal((L, Hh, dc, dh), dc),
        "block.wv": normal((L, Hh, dc, dh), dc),
        "block.wo": normal((L, D, D), D, 0.5),
        "adapter.wk": normal((L, Hh, dc, dh), dc),
        "adapter.wv": normal((L, Hh, dc, dh), dc),
        "mlp.w1": normal((L, D, mlp_hidden), D),
        "mlp.b1": np.zeros((L, mlp_hidden)),
        "mlp.w2": normal((L, mlp_hidden, D), mlp_hidden, 0.5),
        "mlp.b2": np.zeros((L, D)),
        "embed.out.w": normal((D, channels), D, 0.1),
        "embed.out.b": np.zeros(channels),
    }
    return ToyDenoiser(config, params)


@dataclass
class ForwardCache:
    x: np.ndarray
    t: int
    layers: list = field(default_factory=list)
    h_final: np.ndarray | None = None


def denoiser_forward(z_t, t: int, c_t, subjects: Sequence[SubjectCondition], mode: str, model: ToyDenoiser,
                     *, image_scale: float | None = None, plan: ImagePlan | None = None,
                     trace: AttentionTrace | None = None, keep_cache: bool = False):
    """Predict the noise in ``z_t`` (shape H x W x C).

    Returns the prediction, or ``(prediction, cache)`` when ``keep_cache``.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    H, W, C = z_t.shape
    if C != model.channels:
        raise ValueError(f"latent has {C} channels, model expects {model.channels}")
    if not 1 <= t <= model.T:
        raise ValueError(f"timestep {t} outside [1, {model.T}]")
    cfg = model.config
    scale = cfg.image_scale if image_scale is None else image_scale
    c_t = np.asarray(c_t, dtype=np.float64)
    if plan is None:
        plan = build_plan(mode, subjects, (H, W), cfg.zero_init_exterior)
    elif mode == "text-only" or not subjects:
        plan = None
    embs = [s.embedding for s in subjects]
    p = model.params
    block, adapter = model.block, model.adapter

    x = z_t.reshape(H * W, C)
    h = x @ p["embed.in.w"] + p["embed.in.b"] + p["embed.time"][t - 1]
    cache = ForwardCache(x, t) if keep_cache else None
    for l in range(cfg.layers):
        layer_plan = plan if cfg.applies(l, t) else None
        a, bc = block_forward(h, c_t, embs, layer_plan, l, block, adapter, scale, trace, keep_cache)
        h1 = h + a
        u = h1 @ p["mlp.w1"][l] + p["mlp.b1"][l]
        g = silu(u)
        h = h1 + g @ p["mlp.w2"][l] + p["mlp.b2"][l]
        if keep_cache:
            cache.layers.append((bc, h1, u, g))
    eps = h @ p["embed.out.w"] + p["embed.out.b"]
    if not np.all(np.isfinite(eps)):
        raise NumericError(f"denoiser produced non-finite values at t={t}")
    eps = eps.reshape(H, W, C)
    if keep_cache:
        cache.h_final = h
        return eps, cache
    return eps


def denoiser_backward(model: ToyDenoiser, cache: ForwardCache, d_eps: np.ndarray, grads: dict[str, np.ndarray]):
    """Accumulate parameter gradients; returns ``(d_c_t, [d_embedding_j])``."""
    p = model.params
    block, adapter = model.block, model.adapter
    d_eps = d_eps.reshape(cache.x.shape[0], -1)
    grads["embed.out.w"] += cache.h_final.T @ d_eps
    grads["embed.out.b"] += d_eps.sum(axis=0)
    dh = d_eps @ p["embed.out.w"].T
    d_ct = None
    d_embs = None
    for l in reversed(range(model.config.layers)):
        bc, h1, u, g = cache.layers[l]
        grads["mlp.w2"][l] += g.T @ dh
        grads["mlp.b2"][l] += dh.sum(axis=0)
        du = (dh @ p["mlp.w2"][l].T) * silu_grad(u)
        grads["mlp.w1"][l] += h1.T @ du
        grads["mlp.b1"][l] += du.sum(axis=0)
        dh1 = dh + du @ p["mlp.w1"][l].T
        dz, dct_l, dembs_l = block_backward(bc, dh1, block, adapter, grads)
        d_ct = dct_l if d_ct is None else d_ct + dct_l
        d_embs = dembs_l if d_embs is None else [a + b for a, b in zip(d_embs, dembs_l)]
        dh = dh1 + dz
    grads["embed.time"][cache.t - 1] += dh.sum(axis=0)
    grads["embed.in.w"] += cache.x.T @ dh
    grads["embed.in.b"] += dh.sum(axis=0)
    return d_ct, d_embs


# --------------------------------------------------------------------------
# reconstruction loss


@dataclass
class TrainExample:
    """One loss term: clean latent, timestep, noise and table-indexed conditions.

    ``subjects`` index rows of the subject table; ``boxes`` defaults to full
    canvas for every subject.
    """

    z0: np.ndarray
    t: int
    eps: np.ndarray
    scene: int
    subjects: list[int]
    boxes: list[tuple[float, float, float, float]] | None = None
    mode: str = "global-sum"


@dataclass
class EmbeddingTables:
    scene: np.ndarray  # (scenes, prompt_tokens, d_cond)
    subject: np.ndarray  # (subjects, d_cond); row j is a 1 x d_cond embedding

    def as_params(self) -> dict[str, np.ndarray]:
        return {"table.scene": self.scene, "table.subject": self.subject}


def _conditions(ex: TrainExample, tables: EmbeddingTables) -> list[SubjectCondition]:
    boxes = ex.boxes or [(0.0, 0.0, 1.0, 1.0)] * len(ex.subjects)
    return [SubjectCondition(f"s{k}", tables.subject[k][None, :], box, 0) for k, box in zip(ex.subjects, boxes)]


def rec_loss(model: ToyDenoiser, batch: Sequence[TrainExample], tables: EmbeddingTables,
             schedule: Schedule | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared noise-prediction error and its exact gradient.

    Gradients cover every model parameter plus the embedding tables
    (``table.scene``, ``table.subject``).
    """
    if not batch:
        raise ValueError("batch must not be empty")
    schedule = schedule or make_schedule(model.T)
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    grads["table.scene"] = np.zeros_like(tables.scene)
    grads["table.subject"] = np.zeros_like(tables.subject)
    n_coords = sum(ex.eps.size for ex in batch)
    total = 0.0
    for ex in batch:
        z_t = forward_diffuse(ex.z0, ex.t, ex.eps, schedule)
        conds = _conditions(ex, tables)
        pred, cache = denoiser_forward(z_t, ex.t, tables.scene[ex.scene], conds, ex.mode, model, keep_cache=True)
        resid = pred - ex.eps
        total += float(np.sum(resid * resid))
        d_ct, d_embs = denoiser_backward(model, cache, (2.0 / n_coords) * resid, grads)
        grads["table.scene"][ex.scene] += d_ct
        for k, d in zip(ex.subjects, d_embs):
            grads["table.subject"][k] += d[0]
    loss = total / n_coords
    if not math.isfinite(loss):
        raise NumericError("reconstruction loss is not finite")
    return loss, grads
