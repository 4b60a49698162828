"""Dual-level decoupled cross-attention.

The text stream is ordinary cross-attention over the prompt tokens.  The image
stream attends to each subject's adapter keys/values and comes in four modes:

``anyms``
    crop-and-merge: queries inside subject j's rect attend to subject j only,
    results are written back where j wins the priority map, and pixels outside
    every box keep their query vector.
``masked-sum``
    every query attends to every subject; results are masked by the raw box
    and summed.  Exterior pixels are zero.
``global-sum``
    every query attends to every subject; results are summed unmasked.
``text-only``
    no image stream.

All four image modes are expressed as an :class:`ImagePlan`: for each subject,
the query rows that are evaluated and the subset of those outputs that is
written.  One kernel then serves forward, tracing and backprop.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .adapter import AdapterWeights, SubjectCondition
from .errors import ShapeError, WeightsError
from .layout import RegionAssignment, build_region_assignment, masks_from_layout
from .numerics import attention_backward, scaled_dot_attention
from .tensorio import MODES


@dataclass
class AttentionConfig:
    layers: int
    heads: int
    d_model: int
    d_head: int
    d_cond: int
    image_scale: float = 1.0
    apply_layers: frozenset[int] | None = None  # None means every layer
    apply_timesteps: tuple[int, int] | None = None  # inclusive; None means every step
    zero_init_exterior: bool = False

    def __post_init__(self):
        if self.d_model != self.heads * self.d_head:
            raise ValueError(f"d_model ({self.d_model}) must equal heads * d_head ({self.heads} * {self.d_head})")
        if self.image_scale < 0:
            raise ValueError("image_scale must be >= 0")
        if self.apply_layers is not None:
            self.apply_layers = frozenset(self.apply_layers)

    def applies(self, layer: int, step: int | None) -> bool:
        if self.apply_layers is not None and layer not in self.apply_layers:
            return False
        if self.apply_timesteps is not None and step is not None:
            lo, hi = self.apply_timesteps
            return lo <= step <= hi
        return True


@dataclass
class BlockWeights:
    wq: np.ndarray  # (layers, heads, d_model, d_head)
    wk: np.ndarray  # (layers, heads, d_cond, d_head)
    wv: np.ndarray  # (layers, heads, d_cond, d_head)
    wo: np.ndarray  # (layers, d_model, d_model)

    @property
    def heads(self) -> int:
        return self.wq.shape[1]

    def to_entries(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in range(self.wq.shape[0]):
            for head in range(self.wq.shape[1]):
                for name in ("wq", "wk", "wv"):
                    out[f"block.layer{layer}.head{head}.{name}"] = getattr(self, name)[layer, head]
            out[f"block.layer{layer}.wo"] = self.wo[layer]
        return out

    @classmethod
    def from_container(cls, container: Mapping[str, np.ndarray]) -> "BlockWeights":
        pat = re.compile(r"block\.layer(\d+)\.head(\d+)\.wq$")
        keys = [tuple(map(int, m.groups())) for m in map(pat.match, container) if m]
        if not keys:
            raise WeightsError("container holds no attention block weights")
        layers = max(k[0] for k in keys) + 1
        heads = max(k[1] for k in keys) + 1

        def get(name):
            if name not in container:
                raise WeightsError(f"missing tensor {name}")
            return np.asarray(container[name], dtype=np.float64)

        stacked = {
            name: np.stack([np.stack([get(f"block.layer{l}.head{h}.{name}") for h in range(heads)])
                            for l in range(layers)])
            for name in ("wq", "wk", "wv")
        }
        wo = np.stack([get(f"block.layer{l}.wo") for l in range(layers)])
        return cls(wo=wo, **stacked)


# --------------------------------------------------------------------------
# plans


@dataclass
class SubjectPlan:
    compute: np.ndarray | None  # flat query rows evaluated; None means all rows
    write: np.ndarray  # positions within the evaluated rows that reach Z_image
    rows: np.ndarray  # flat rows receiving those outputs


@dataclass
class ImagePlan:
    mode: str
    n_rows: int
    subjects: list[SubjectPlan]
    exterior: np.ndarray | None = None  # rows initialized with Q
    accumulate: bool = True  # sum overlapping writes instead of overwriting


def plan_anyms(assignment: RegionAssignment, zero_init_exterior: bool = False) -> ImagePlan:
    H, W = assignment.shape
    flat = assignment.winner.reshape(-1)
    subjects = []
    for j, rect in enumerate(assignment.rects):
        compute = rect.flat_indices(W)
        write = np.flatnonzero(flat[compute] == j)
        subjects.append(SubjectPlan(compute, write, compute[write]))
    exterior = None if zero_init_exterior else np.flatnonzero(flat == -1)
    return ImagePlan("anyms", H * W, subjects, exterior, accumulate=False)


def plan_masked_sum(masks: Sequence[np.ndarray]) -> ImagePlan:
    subjects = []
    n_rows = 0
    for m in masks:
        rows = np.flatnonzero(np.asarray(m).reshape(-1))
        n_rows = m.size
        subjects.append(SubjectPlan(None, rows, rows))
    return ImagePlan("masked-sum", n_rows, subjects)


def plan_global_sum(n_subjects: int, n_rows: int) -> ImagePlan:
    everything = np.arange(n_rows)
    return ImagePlan("global-sum", n_rows, [SubjectPlan(None, everything, everything) for _ in range(n_subjects)])


def build_plan(mode: str, subjects: Sequence[SubjectCondition], grid: tuple[int, int],
               zero_init_exterior: bool = False) -> ImagePlan | None:
    """Image-stream plan for ``mode``; ``None`` when the image stream is off."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    if mode == "text-only" or not subjects:
        return None
    H, W = grid
    if mode == "anyms":
        return plan_anyms(build_region_assignment(subjects, H, W), zero_init_exterior)
    if mode == "masked-sum":
        return plan_masked_sum(masks_from_layout(subjects, H, W))
    return plan_global_sum(len(subjects), H * W)


# --------------------------------------------------------------------------
# tracing


@dataclass
class AttentionTrace:
    """Softmax statistics gathered during a forward pass or a sampling run.

    ``row_sums`` holds one record per softmax evaluation; ``mass`` maps
    ``(layer, step, subject)`` to the per-pixel attention mass on that
    subject's keys, averaged over heads.
    """

    grid: tuple[int, int]
    step: int | None = None
    row_sums: list[tuple[int, int | None, str, int, int, np.ndarray]] = field(default_factory=list)
    mass: dict[tuple[int, int | None, int], np.ndarray] = field(default_factory=dict)
    _mass_heads: dict[tuple[int, int | None, int], int] = field(default_factory=dict)

    def record_text(self, layer: int, head: int, probs: np.ndarray) -> None:
        self.row_sums.append((layer, self.step, "text", -1, head, probs.sum(axis=1)))

    def record_subject(self, layer: int, head: int, subject: int, probs: np.ndarray, sp: SubjectPlan) -> None:
        sums = probs.sum(axis=1)
        self.row_sums.append((layer, self.step, "image", subject, head, sums))
        key = (layer, self.step, subject)
        H, W = self.grid
        per_pixel = np.zeros(H * W)
        per_pixel[sp.rows] = sums[sp.write]
        if key in self.mass:
            self.mass[key] = self.mass[key] + per_pixel
            self._mass_heads[key] += 1
        else:
            self.mass[key] = per_pixel
            self._mass_heads[key] = 1

    def heatmaps(self) -> dict[tuple[int, int | None, int], np.ndarray]:
        H, W = self.grid
        return {k: (v / self._mass_heads[k]).reshape(H, W) for k, v in self.mass.items()}

    def to_entries(self) -> dict[str, np.ndarray]:
        """Head-averaged heatmaps as ``attn.L{layer}.t{step}.s{subject}`` container entries."""
        return {f"attn.L{l}.t{'none' if t is None else t}.s{j}": m for (l, t, j), m in sorted(
            self.heatmaps().items(), key=lambda kv: (kv[0][1] is None, kv[0]))}

    @classmethod
    def from_entries(cls, entries: Mapping[str, np.ndarray]) -> "AttentionTrace":
        pattern = re.compile(r"attn\.L(\d+)\.t(\d+|none)\.s(\d+)$")
        trace = None
        for name, m in entries.items():
            match = pattern.match(name)
            if match is None:
                continue
            m = np.asarray(m, dtype=np.float64)
            if m.ndim != 2:
                raise ShapeError(f"{name}: heatmap must be 2-D, got shape {m.shape}")
            if trace is None:
                trace = cls(m.shape)
            elif m.shape != tuple(trace.grid):
                raise ShapeError(f"{name}: shape {m.shape} differs from {trace.grid}")
            layer, step, subject = match.groups()
            key = (int(layer), None if step == "none" else int(step), int(subject))
            trace.mass[key] = m.reshape(-1)
            trace._mass_heads[key] = 1
        if trace is None:
            raise ValueError("no attn.L*.t*.s* entries found")
        return trace

    def max_row_sum_error(self) -> float:
        if not self.row_sums:
            return 0.0
        return max(float(np.max(np.abs(r[-1] - 1.0))) for r in self.row_sums)


# --------------------------------------------------------------------------
# kernels


def _image_head(q, kvs, plan: ImagePlan, layer: int, head: int, trace: AttentionTrace | None):
    z = np.zeros_like(q)
    if plan.exterior is not None:
        z[plan.exterior] = q[plan.exterior]
    cache = []
    for j, ((k, v), sp) in enumerate(zip(kvs, plan.subjects)):
        qc = q if sp.compute is None else q[sp.compute]
        out, probs = scaled_dot_attention(qc, k, v, return_weights=True)
        if plan.accumulate:
            z[sp.rows] += out[sp.write]
        else:
            z[sp.rows] = out[sp.write]
        if trace is not None:
            trace.record_subject(layer, head, j, probs, sp)
        cache.append((qc, k, v, probs))
    return z, cache


def _check_z(Z, d_model: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != d_model:
        raise ShapeError(f"latent features must be (H*W, {d_model}), got {Z.shape}")
    return Z


def text_cross_attention(Z, c_t, layer: int, weights: BlockWeights,
                         trace: AttentionTrace | None = None) -> np.ndarray:
    """Per-head prompt cross-attention, heads concatenated (before W_o)."""
    Z = _check_z(Z, weights.wq.shape[2])
    c_t = np.asarray(c_t, dtype=np.float64)
    if c_t.ndim != 2 or c_t.shape[1] != weights.wk.shape[2]:
        raise ShapeError(f"prompt embedding {c_t.shape} does not match d_cond={weights.wk.shape[2]}")
    parts = []
    for h in range(weights.heads):
        out, probs = scaled_dot_attention(Z @ weights.wq[layer, h], c_t @ weights.wk[layer, h],
                                          c_t @ weights.wv[layer, h], return_weights=True)
        if trace is not None:
            trace.record_text(layer, h, probs)
        parts.append(out)
    return np.concatenate(parts, axis=1)


def image_cross_attention(Z, subjects: Sequence[SubjectCondition], plan: ImagePlan, layer: int,
                          weights: BlockWeights, adapter: AdapterWeights,
                          trace: AttentionTrace | None = None) -> np.ndarray:
    """Run the image stream described by ``plan``; heads concatenated."""
    if not subjects:
        raise ValueError("image cross-attention needs at least one subject; use text-only")
    if len(subjects) != len(plan.subjects):
        raise ValueError("plan and subject list disagree in length")
    if layer >= adapter.wk.shape[0] or weights.heads > adapter.wk.shape[1]:
        raise WeightsError(f"adapter weights missing for layer {layer}")
    Z = _check_z(Z, weights.wq.shape[2])
    if Z.shape[0] != plan.n_rows:
        raise ShapeError(f"plan covers {plan.n_rows} rows, features have {Z.shape[0]}")
    parts = []
    for h in range(weights.heads):
        q = Z @ weights.wq[layer, h]
        kvs = [(s.embedding @ adapter.wk[layer, h], s.embedding @ adapter.wv[layer, h]) for s in subjects]
        z, _ = _image_head(q, kvs, plan, layer, h, trace)
        parts.append(z)
    return np.concatenate(parts, axis=1)


def local_image_cross_attention(Z, subjects, assignment: RegionAssignment, layer, weights, adapter,
                                zero_init_exterior: bool = False, trace=None) -> np.ndarray:
    """Crop-and-merge image attention driven by a priority winner map."""
    return image_cross_attention(Z, subjects, plan_anyms(assignment, zero_init_exterior), layer,
                                 weights, adapter, trace)


def masked_sum_image_cross_attention(Z, subjects, masks, layer, weights, adapter, trace=None) -> np.ndarray:
    """Full-grid attention per subject, masked by the raw box and summed."""
    return image_cross_attention(Z, subjects, plan_masked_sum(masks), layer, weights, adapter, trace)


def global_sum_image_cross_attention(Z, subjects, layer, weights, adapter, trace=None) -> np.ndarray:
    """Full-grid attention per subject, summed with no layout gating."""
    Z = np.asarray(Z, dtype=np.float64)
    return image_cross_attention(Z, subjects, plan_global_sum(len(subjects), Z.shape[0]), layer,
                                 weights, adapter, trace)


# --------------------------------------------------------------------------
# the decoupled block, with a cache for backprop


@dataclass
class BlockCache:
    layer: int
    z_in: np.ndarray
    c_t: np.ndarray
    embeddings: list[np.ndarray]
    plan: ImagePlan | None
    image_scale: float
    y: np.ndarray
    heads: list[dict]


def block_forward(Z, c_t, embeddings: Sequence[np.ndarray], plan: ImagePlan | None, layer: int,
                  weights: BlockWeights, adapter: AdapterWeights | None, image_scale: float,
                  trace: AttentionTrace | None = None, keep_cache: bool = False):
    """(Z_text + image_scale * Z_image) W_o.  Returns ``(out, cache_or_None)``."""
    use_image = plan is not None and image_scale != 0.0
    if use_image and adapter is None:
        raise WeightsError("image stream requested without adapter weights")
    heads = []
    parts = []
    for h in range(weights.heads):
        q = Z @ weights.wq[layer, h]
        kt = c_t @ weights.wk[layer, h]
        vt = c_t @ weights.wv[layer, h]
        at, pt = scaled_dot_attention(q, kt, vt, return_weights=True)
        if trace is not None:
            trace.record_text(layer, h, pt)
        entry = {"q": q, "text": (kt, vt, pt)}
        if use_image:
            kvs = [(e @ adapter.wk[layer, h], e @ adapter.wv[layer, h]) for e in embeddings]
            zi, icache = _image_head(q, kvs, plan, layer, h, trace)
            parts.append(at + image_scale * zi)
            entry["image"] = icache
        else:
            parts.append(at)
        heads.append(entry)
    y = np.concatenate(parts, axis=1)
    out = y @ weights.wo[layer]
    cache = None
    if keep_cache:
        cache = BlockCache(layer, Z, c_t, list(embeddings), plan if use_image else None, image_scale, y, heads)
    return out, cache


def block_backward(cache: BlockCache, d_out: np.ndarray, weights: BlockWeights, adapter: AdapterWeights | None,
                   grads: dict[str, np.ndarray]):
    """Backprop through :func:`block_forward`.

    Accumulates parameter gradients into ``grads`` (keys ``block.*`` and
    ``adapter.*``, stacked like the weights) and returns
    ``(dZ, d_c_t, [d_embedding_j])``.
    """
    l = cache.layer
    dh_size = weights.wq.shape[3]
    grads["block.wo"][l] += cache.y.T @ d_out
    dy = d_out @ weights.wo[l].T
    dZ = np.zeros_like(cache.z_in)
    d_ct = np.zeros_like(cache.c_t)
    d_embs = [np.zeros_like(e) for e in cache.embeddings]
    for h, entry in enumerate(cache.heads):
        d_head = dy[:, h * dh_size : (h + 1) * dh_size]
        q = entry["q"]
        kt, vt, pt = entry["text"]
        dq, dk, dv = attention_backward(q, kt, vt, pt, d_head)
        grads["block.wk"][l, h] += cache.c_t.T @ dk
        grads["block.wv"][l, h] += cache.c_t.T @ dv
        d_ct += dk @ weights.wk[l, h].T + dv @ weights.wv[l, h].T
        if cache.plan is not None:
            plan = cache.plan
            dzi = cache.image_scale * d_head
            if plan.exterior is not None:
                dq[plan.exterior] += dzi[plan.exterior]
            for j, ((qc, k, v, probs), sp) in enumerate(zip(entry["image"], plan.subjects)):
                d_sub = np.zeros((qc.shape[0], dh_size))
                d_sub[sp.write] = dzi[sp.rows]
                dqc, dkj, dvj = attention_backward(qc, k, v, probs, d_sub)
                if sp.compute is None:
                    dq += dqc
                else:
                    dq[sp.compute] += dqc
                e = cache.embeddings[j]
                grads["adapter.wk"][l, h] += e.T @ dkj
                grads["adapter.wv"][l, h] += e.T @ dvj
                d_embs[j] += dkj @ adapter.wk[l, h].T + dvj @ adapter.wv[l, h].T
        grads["block.wq"][l, h] += cache.z_in.T @ dq
        dZ += dq @ weights.wq[l, h].T
    return dZ, d_ct, d_embs


def decoupled_block(Z, c_t, subjects: Sequence[SubjectCondition], grid: tuple[int, int], mode: str, layer: int,
                    step: int | None, weights: BlockWeights, adapter: AdapterWeights | None,
                    config: AttentionConfig, plan: ImagePlan | None = None,
                    trace: AttentionTrace | None = None) -> np.ndarray:
    """One cross-attention block: W_o applied to Z_text + image_scale * Z_image.

    The image term is dropped for ``text-only``, for an empty subject list and
    for layers/steps outside the config's application window.  ``plan`` may be
    passed to reuse a precomputed layout plan.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    Z = _check_z(Z, config.d_model)
    c_t = np.asarray(c_t, dtype=np.float64)
    if not config.applies(layer, step):
        plan = None
    elif plan is None:
        plan = build_plan(mode, subjects, grid, config.zero_init_exterior)
    if mode == "text-only" or not subjects:
        plan = None
    out, _ = block_forward(Z, c_t, [s.embedding for s in subjects], plan, layer, weights, adapter,
                           config.image_scale, trace)
    return out
