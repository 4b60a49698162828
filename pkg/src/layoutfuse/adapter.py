"""Subject conditions and the adapter's key/value projections.

Embeddings ``c_j`` are taken as given (from a container or the toy lookup
table); nothing is tuned per subject combination.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ShapeError, SpecError, WeightsError
from .layout import GridRect, box_to_grid


@dataclass
class SubjectCondition:
    id: str
    embedding: np.ndarray  # (m_j, d_cond)
    box: tuple[float, float, float, float]
    priority: int = 0

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if self.embedding.ndim != 2 or self.embedding.shape[0] < 1:
            raise ShapeError(f"subject {self.id!r}: embedding must be (m_j >= 1, d_cond), got {self.embedding.shape}")
        if not np.all(np.isfinite(self.embedding)):
            raise ShapeError(f"subject {self.id!r}: embedding is not finite")

    def rect(self, H: int, W: int) -> GridRect:
        return box_to_grid(self.box, H, W)


@dataclass
class AdapterWeights:
    wk: np.ndarray  # (layers, heads, d_cond, d_head)
    wv: np.ndarray  # (layers, heads, d_cond, d_head)

    @property
    def d_cond(self) -> int:
        return self.wk.shape[2]

    def to_entries(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in range(self.wk.shape[0]):
            for head in range(self.wk.shape[1]):
                out[f"adapter.layer{layer}.head{head}.wk"] = self.wk[layer, head]
                out[f"adapter.layer{layer}.head{head}.wv"] = self.wv[layer, head]
        return out

    @classmethod
    def from_container(cls, container: Mapping[str, np.ndarray]) -> "AdapterWeights":
        pat = re.compile(r"adapter\.layer(\d+)\.head(\d+)\.wk$")
        keys = [tuple(map(int, m.groups())) for m in map(pat.match, container) if m]
        if not keys:
            raise WeightsError("container holds no adapter weights")
        layers = max(k[0] for k in keys) + 1
        heads = max(k[1] for k in keys) + 1
        wk = np.stack([np.stack([_get(container, f"adapter.layer{l}.head{h}.wk") for h in range(heads)])
                       for l in range(layers)])
        wv = np.stack([np.stack([_get(container, f"adapter.layer{l}.head{h}.wv") for h in range(heads)])
                       for l in range(layers)])
        return cls(wk, wv)


def _get(container, name):
    if name not in container:
        raise WeightsError(f"missing tensor {name}")
    return np.asarray(container[name], dtype=np.float64)


def subject_kv(c_j, layer: int, head: int, weights: AdapterWeights) -> tuple[np.ndarray, np.ndarray]:
    """K_j = c_j W_k', V_j = c_j W_v' (row-vector convention)."""
    if not (0 <= layer < weights.wk.shape[0] and 0 <= head < weights.wk.shape[1]):
        raise WeightsError(f"no adapter weights for layer {layer}, head {head}")
    c_j = np.asarray(c_j, dtype=np.float64)
    if c_j.ndim != 2 or c_j.shape[1] != weights.d_cond:
        raise ShapeError(f"embedding {c_j.shape} does not match adapter d_cond={weights.d_cond}")
    return c_j @ weights.wk[layer, head], c_j @ weights.wv[layer, head]


def load_conditions(spec, container: Mapping[str, np.ndarray] | None = None,
                    weights: AdapterWeights | None = None) -> list[SubjectCondition]:
    """Resolve a layout spec's subjects into ordered :class:`SubjectCondition` objects."""
    conditions = []
    for i, entry in enumerate(spec.subjects):
        if container is not None:
            if entry.embedding_name not in container:
                raise SpecError("unknown-tensor", f"$.subjects[{i}].embedding",
                                f"no tensor named {entry.embedding_name!r} in container")
            emb = container[entry.embedding_name]
        else:
            emb = entry.embedding
        cond = SubjectCondition(entry.id, emb, tuple(entry.box), entry.priority)
        if weights is not None and cond.embedding.shape[1] != weights.d_cond:
            raise ShapeError(
                f"subject {entry.id!r}: d_cond {cond.embedding.shape[1]} != adapter d_cond {weights.d_cond}"
            )
        conditions.append(cond)
    return conditions
