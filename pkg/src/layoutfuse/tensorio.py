"""Tensor container I/O, layout-spec parsing and PPM output.

Container layout::

    [u64 little-endian header length N][N bytes UTF-8 JSON header][data]

The header maps each tensor name to ``{"dtype", "shape", "offset"}``; offsets
are relative to the start of the data section.  Tensors are stored row-major,
little-endian, back to back with no padding.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ContainerError, NumericError, SpecError

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
MODES = ("anyms", "masked-sum", "global-sum", "text-only")

_HEADER_LEN = struct.Struct("<Q")


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise ContainerError(f"unsupported dtype {arr.dtype}; only f32/f64 can be stored")


def write_container(entries) -> bytes:
    """Serialize named tensors; insertion order fixes the data layout.

    ``entries`` is a mapping or an iterable of ``(name, array)`` pairs.
    """
    items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    header: dict[str, dict[str, Any]] = {}
    chunks = []
    offset = 0
    for name, value in items:
        if name in header:
            raise ContainerError(f"duplicate tensor name {name!r}")
        if not isinstance(name, str) or not name:
            raise ContainerError(f"tensor names must be non-empty strings, got {name!r}")
        arr = np.asarray(value)
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes(order="C")
        if len(raw) != math.prod(arr.shape) * DTYPES[tag].itemsize:
            raise ContainerError(f"{name}: byte length does not match shape {arr.shape}")
        header[name] = {"dtype": tag, "shape": [int(s) for s in arr.shape], "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return _HEADER_LEN.pack(len(blob)) + blob + b"".join(chunks)


def read_container(data: bytes) -> dict[str, np.ndarray]:
    """Parse a container produced by :func:`write_container`.

    Tensors keep their stored dtype so a read/write cycle is byte-identical;
    consumers widen to f64 where they compute.
    """
    data = bytes(data)
    if len(data) < _HEADER_LEN.size:
        raise ContainerError("truncated: missing header length")
    (n,) = _HEADER_LEN.unpack_from(data)
    if len(data) < _HEADER_LEN.size + n:
        raise ContainerError(f"truncated: header declares {n} bytes, file has {len(data) - 8}")
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed header JSON: {exc}") from None
    if not isinstance(header, dict):
        raise ContainerError("header must be a JSON object")
    payload = memoryview(data)[8 + n :]

    spans = []
    for name, meta in header.items():
        if not isinstance(meta, dict) or set(meta) != {"dtype", "shape", "offset"}:
            raise ContainerError(f"{name}: entry needs exactly dtype, shape, offset")
        if meta["dtype"] not in DTYPES:
            raise ContainerError(f"{name}: unknown dtype {meta['dtype']!r}")
        shape = meta["shape"]
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
        ):
            raise ContainerError(f"{name}: shape must be a list of non-negative integers")
        offset = meta["offset"]
        if not isinstance(offset, int) or isinstance(offset, bool) or offset < 0:
            raise ContainerError(f"{name}: offset must be a non-negative integer")
        nbytes = math.prod(shape) * DTYPES[meta["dtype"]].itemsize
        if offset + nbytes > len(payload):
            raise ContainerError(f"{name}: bytes [{offset}, {offset + nbytes}) exceed data section of {len(payload)}")
        spans.append((offset, nbytes, name))

    end = 0
    for offset, nbytes, name in sorted(spans):
        if offset < end:
            raise ContainerError(f"{name}: overlaps previous tensor")
        if offset > end:
            raise ContainerError(f"{name}: gap before offset {offset} (padding is not allowed)")
        end = offset + nbytes
    if end != len(payload):
        raise ContainerError(f"{len(payload) - end} trailing bytes after last tensor")

    out = {}
    for name, meta in header.items():
        dt = DTYPES[meta["dtype"]]
        count = math.prod(meta["shape"])
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=meta["offset"])
        out[name] = arr.reshape(meta["shape"]).copy()
    return out


def save_container(path: str | Path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(write_container(entries))


def load_container(path: str | Path) -> dict[str, np.ndarray]:
    return read_container(Path(path).read_bytes())


# --------------------------------------------------------------------------
# layout specs


@dataclass
class SubjectEntry:
    id: str
    embedding_name: str
    box: tuple[float, float, float, float]
    priority: int = 0
    embedding: np.ndarray | None = None


@dataclass
class LayoutSpec:
    grid: tuple[int, int, int]
    prompt: str
    prompt_embedding: np.ndarray
    subjects: list[SubjectEntry] = field(default_factory=list)
    seed: int = 0
    steps: int = 50
    mode: str = "anyms"
    image_scale: float = 1.0
    guidance: float = 0.0

    @property
    def d_cond(self) -> int:
        return int(self.prompt_embedding.shape[1])

    def to_json(self) -> dict:
        return {
            "grid": list(self.grid),
            "prompt": self.prompt,
            "subjects": [
                {"id": s.id, "embedding": s.embedding_name, "box": list(s.box), "priority": s.priority}
                for s in self.subjects
            ],
            "seed": self.seed,
            "steps": self.steps,
            "mode": self.mode,
            "image_scale": self.image_scale,
            "guidance": self.guidance,
        }


_TOP_KEYS = {"grid", "prompt", "subjects", "seed", "steps", "mode", "image_scale", "guidance"}
_SUBJECT_KEYS = {"id", "embedding", "box", "priority"}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def check_box(box, where: str = "box") -> tuple[float, float, float, float]:
    if not isinstance(box, (list, tuple)) or len(box) != 4 or not all(_is_num(v) for v in box):
        raise SpecError("wrong-type", where, "box must be four numbers [x0, y0, x1, y1]")
    x0, y0, x1, y1 = (float(v) for v in box)
    if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in (x0, y0, x1, y1)):
        raise SpecError("box-out-of-range", where, f"coordinates must lie in [0, 1], got {list(box)}")
    if not (x0 < x1 and y0 < y1):
        raise SpecError("box-degenerate", where, f"need x0 < x1 and y0 < y1, got {list(box)}")
    return (x0, y0, x1, y1)


def _embedding(container: Mapping[str, np.ndarray], name, where: str) -> np.ndarray:
    if not isinstance(name, str):
        raise SpecError("wrong-type", where, "tensor name must be a string")
    if name not in container:
        raise SpecError("unknown-tensor", where, f"no tensor named {name!r} in container")
    arr = np.asarray(container[name], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise SpecError("embedding-shape", where, f"{name!r} must be a non-empty 2-D tensor, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SpecError("embedding-nonfinite", where, f"{name!r} contains NaN/inf")
    return arr


def parse_layout_spec(text: str | bytes, container: Mapping[str, np.ndarray]) -> LayoutSpec:
    """Validate layout-spec JSON and attach embeddings from ``container``."""
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SpecError("bad-json", "$", str(exc)) from None
    if not isinstance(doc, dict):
        raise SpecError("wrong-type", "$", "spec must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SpecError("unknown-field", f"$.{sorted(unknown)[0]}", "field not in schema")
    for key in ("grid", "prompt", "subjects", "seed", "steps"):
        if key not in doc:
            raise SpecError("missing-field", f"$.{key}", "required field is missing")

    grid = doc["grid"]
    if not isinstance(grid, list) or len(grid) != 3 or not all(_is_int(v) for v in grid):
        raise SpecError("wrong-type", "$.grid", "grid must be [H, W, C] integers")
    if min(grid) < 1:
        raise SpecError("invalid-value", "$.grid", "grid dimensions must be positive")

    seed = doc["seed"]
    if not _is_int(seed):
        raise SpecError("wrong-type", "$.seed", "seed must be an integer")
    if not 0 <= seed < 2**64:
        raise SpecError("invalid-value", "$.seed", "seed must fit in an unsigned 64-bit integer")
    steps = doc["steps"]
    if not _is_int(steps):
        raise SpecError("wrong-type", "$.steps", "steps must be an integer")
    if steps < 1:
        raise SpecError("invalid-value", "$.steps", "steps must be >= 1")
    mode = doc.get("mode", "anyms")
    if mode not in MODES:
        raise SpecError("invalid-value", "$.mode", f"mode must be one of {', '.join(MODES)}")
    scale = doc.get("image_scale", 1.0)
    if not _is_num(scale) or not math.isfinite(scale):
        raise SpecError("wrong-type", "$.image_scale", "image_scale must be a finite number")
    if scale < 0:
        raise SpecError("invalid-value", "$.image_scale", "image_scale must be >= 0")
    guidance = doc.get("guidance", 0.0)
    if not _is_num(guidance) or not math.isfinite(guidance):
        raise SpecError("wrong-type", "$.guidance", "guidance must be a finite number")
    if guidance < 0:
        raise SpecError("invalid-value", "$.guidance", "guidance must be >= 0")

    prompt_emb = _embedding(container, doc["prompt"], "$.prompt")
    d_cond = prompt_emb.shape[1]

    if not isinstance(doc["subjects"], list):
        raise SpecError("wrong-type", "$.subjects", "subjects must be a list")
    subjects = []
    seen = set()
    for i, raw in enumerate(doc["subjects"]):
        where = f"$.subjects[{i}]"
        if not isinstance(raw, dict):
            raise SpecError("wrong-type", where, "subject must be an object")
        extra = set(raw) - _SUBJECT_KEYS
        if extra:
            raise SpecError("unknown-field", f"{where}.{sorted(extra)[0]}", "field not in schema")
        for key in ("id", "embedding", "box"):
            if key not in raw:
                raise SpecError("missing-field", f"{where}.{key}", "required field is missing")
        sid = raw["id"]
        if not isinstance(sid, str) or not sid:
            raise SpecError("wrong-type", f"{where}.id", "id must be a non-empty string")
        if sid in seen:
            raise SpecError("duplicate-id", f"{where}.id", f"subject id {sid!r} used twice")
        seen.add(sid)
        box = check_box(raw["box"], f"{where}.box")
        priority = raw.get("priority", 0)
        if not _is_int(priority):
            raise SpecError("wrong-type", f"{where}.priority", "priority must be an integer")
        emb = _embedding(container, raw["embedding"], f"{where}.embedding")
        if emb.shape[1] != d_cond:
            raise SpecError(
                "embedding-shape", f"{where}.embedding", f"d_cond {emb.shape[1]} differs from prompt's {d_cond}"
            )
        subjects.append(SubjectEntry(sid, raw["embedding"], box, priority, emb))

    return LayoutSpec(
        grid=tuple(grid),
        prompt=doc["prompt"],
        prompt_embedding=prompt_emb,
        subjects=subjects,
        seed=seed,
        steps=steps,
        mode=mode,
        image_scale=float(scale),
        guidance=float(guidance),
    )


# --------------------------------------------------------------------------
# images


def to_bytes(grid: np.ndarray) -> np.ndarray:
    """Map values in [-1, 1] to uint8 via clamp(round((v + 1) / 2 * 255))."""
    v = np.asarray(grid, dtype=np.float64)
    return np.clip(np.floor((v + 1.0) / 2.0 * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image(grid: np.ndarray, path: str | Path) -> None:
    """Write an H x W x 3 grid as a binary PPM (P6)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 grid, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise NumericError("image contains NaN or infinite values")
    h, w, _ = grid.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes(grid).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Read a P6 PPM written by :func:`write_image`, mapped back to [-1, 1]."""
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255" or pos >= len(raw):
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos + 1 :]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pix.astype(np.float64) / 255.0 * 2.0 - 1.0
