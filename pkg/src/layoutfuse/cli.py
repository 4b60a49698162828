"""``layoutfuse`` command line: generate, train-toy, bench, eval-layout, inspect-attn.

Exit codes are fixed: 0 success, 1 I/O failure, 2 invalid input (flags,
spec, container, weights), 3 numeric failure (NaN or divergence).
Successful runs write a JSON run manifest: beside the primary output for
``generate``/``train-toy``/``inspect-attn``, and on request (``--manifest``)
for the stdout-only commands.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .attention import AttentionTrace
from .bench import run_benchmark
from .diffusion.model import ToyDenoiser
from .diffusion.sampler import sample
from .diffusion.toy import ToyDataConfig, ToyAssets, TrainConfig, config_dict, schedule_from_container, train_toy
from .errors import ContainerError, NumericError, ShapeError, SpecError, WeightsError
from .layout import GridRect, box_to_grid
from .metrics import attention_heatmap_dump, layout_miou, localize_subjects
from .tensorio import MODES, check_box, load_container, parse_layout_spec, read_image, save_container, write_image

log = logging.getLogger("layoutfuse")

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ValueError):
    """Flag combination or value rejected after argparse."""


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str]
    outputs: list[str]
    wall_clock: float
    version: str = __version__

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _manifest_path(args, default: Path | None) -> Path | None:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    return default


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return v


# --------------------------------------------------------------------------
# generate


def run_generate(args) -> tuple[dict, int | None, list[str], list[str], Path | None]:
    container = load_container(args.weights)
    model = ToyDenoiser.from_container(container)
    schedule = schedule_from_container(container, model.T)
    spec = parse_layout_spec(Path(args.spec).read_bytes(), container)

    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.image_scale is not None:
        overrides["image_scale"] = args.image_scale
    if args.guidance is not None:
        if args.guidance < 0 or not np.isfinite(args.guidance):
            raise UsageError(f"--guidance must be a finite number >= 0, got {args.guidance}")
        overrides["guidance"] = args.guidance
    spec = dataclasses.replace(spec, **overrides)
    if spec.steps > schedule.T:
        raise UsageError(f"steps={spec.steps} exceeds the model's T={schedule.T}")

    want_trace = bool(args.dump_attn or args.dump_trace)
    result = sample(spec, model, schedule, trace=want_trace)

    out = Path(args.out)
    write_image(result.image, out)
    outputs = [str(out)]
    if args.dump_latent:
        save_container(args.dump_latent, {"z0": result.z0})
        outputs.append(str(args.dump_latent))
    if args.dump_trace:
        save_container(args.dump_trace, result.trace.to_entries())
        outputs.append(str(args.dump_trace))
    if args.dump_attn:
        outputs += [str(p) for p in attention_heatmap_dump(result.trace, args.dump_attn)]

    config = spec.to_json()
    config.update(timesteps=result.timesteps, model_evaluations=result.model_evaluations,
                  model_parameters=model.parameter_count())
    return config, spec.seed, [args.spec, args.weights], outputs, out.with_name(out.name + ".manifest.json")


# --------------------------------------------------------------------------
# train-toy


def _train_configs(args) -> tuple[ToyDataConfig, TrainConfig]:
    data, hp = ToyDataConfig(), TrainConfig()
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict) or set(raw) - {"data", "train"}:
            raise UsageError('--config must be an object with optional "data" and "train" sections')
        try:
            data_fields = dict(raw.get("data", {}))
            if "palette" in data_fields:
                data_fields["palette"] = tuple(data_fields["palette"])
            data = dataclasses.replace(data, **data_fields)
            hp = dataclasses.replace(hp, **raw.get("train", {}))
        except TypeError as exc:
            raise UsageError(f"--config: {exc}") from exc
    for flag, name in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            hp = dataclasses.replace(hp, **{name: value})
    if hp.lr <= 0 or not np.isfinite(hp.lr):
        raise UsageError(f"learning rate must be positive, got {hp.lr}")
    if hp.epochs < 0 or hp.batch_size < 1:
        raise UsageError("epochs must be >= 0 and batch size >= 1")
    return data, hp


def run_train_toy(args):
    data, hp = _train_configs(args)
    inputs = [args.config] if args.config else []
    assets = train_toy(data, hp, seed=args.seed)
    entries = assets.to_entries()
    if assets.loss_curve:
        entries["meta.loss_curve"] = np.asarray(assets.loss_curve, dtype=np.float64)
    out = Path(args.out)
    save_container(out, entries)
    config = config_dict(data, hp)
    config["holdout_loss"] = {"initial": assets.holdout_loss[0], "final": assets.holdout_loss[1]}
    config["loss_curve"] = assets.loss_curve
    config["model_parameters"] = assets.model.parameter_count()
    return config, args.seed, inputs, [str(out)], out.with_name(out.name + ".manifest.json")


# --------------------------------------------------------------------------
# bench


def _bench_table(report: dict) -> str:
    rows = [
        ("grid", report["grid"]),
        ("subjects", report["subjects"]),
        ("coverage", report["coverage"]),
        ("anyms median (s)", f"{report['anyms_median_s']:.6g}"),
        ("masked-sum median (s)", f"{report['masked_sum_median_s']:.6g}"),
        ("time ratio", f"{report['time_ratio']:.4f}"),
        ("FLOP ratio", f"{report['flop_ratio']:.6g}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def run_bench(args):
    if not (0.0 < args.coverage <= 1.0):
        raise UsageError(f"--coverage must lie in (0, 1], got {args.coverage}")
    if args.subjects > args.grid:
        raise UsageError(f"--subjects ({args.subjects}) cannot exceed --grid ({args.grid})")
    result = run_benchmark(grid=args.grid, subjects=args.subjects, coverage=args.coverage, repeat=args.repeat,
                           seed=args.seed, tokens=args.tokens, d_head=args.d_head, heads=args.heads)
    report = result.to_json()
    report["anyms_seconds"] = result.anyms_seconds
    report["masked_sum_seconds"] = result.masked_seconds
    if args.format == "json":
        print(json.dumps(report, indent=2))
    else:
        print(_bench_table(report))
    config = {k: getattr(args, k) for k in ("grid", "subjects", "coverage", "repeat", "tokens", "d_head", "heads")}
    return config, args.seed, [], [], None


# --------------------------------------------------------------------------
# eval-layout


def _target_rects(path: str) -> tuple[list[str], list[GridRect], tuple[int, int]]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"--target is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "grid" not in raw or "subjects" not in raw:
        raise UsageError('--target must be a JSON object with "grid" and "subjects"')
    grid = raw["grid"]
    if not isinstance(grid, list) or len(grid) < 2 or not all(isinstance(v, int) and v > 0 for v in grid[:2]):
        raise SpecError("wrong-type", "grid", "expected [H, W, ...] positive integers")
    H, W = grid[0], grid[1]
    ids, rects = [], []
    for i, s in enumerate(raw["subjects"]):
        if not isinstance(s, dict) or "box" not in s:
            raise SpecError("missing-field", f"subjects[{i}].box", "every target subject needs a box")
        ids.append(str(s.get("id", i)))
        rects.append(box_to_grid(check_box(s["box"], f"subjects[{i}].box"), H, W))
    return ids, rects, (H, W)


def _pred_rects(path: str, count: int) -> list[GridRect | None]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"--pred is not valid JSON: {exc}") from exc
    if isinstance(raw, dict):
        raw = raw.get("rects")
    if not isinstance(raw, list) or len(raw) != count:
        raise UsageError(f"--pred must list exactly {count} rects ([h_s, h_e, w_s, w_e] or null)")
    out = []
    for i, r in enumerate(raw):
        if r is None:
            out.append(None)
            continue
        if not (isinstance(r, list) and len(r) == 4 and all(isinstance(v, int) for v in r)):
            raise SpecError("wrong-type", f"rects[{i}]", "expected [h_s, h_e, w_s, w_e] integers or null")
        if r[0] >= r[1] or r[2] >= r[3]:
            raise SpecError("box-degenerate", f"rects[{i}]", "rect must have positive extent")
        out.append(GridRect(*r))
    return out


def run_eval_layout(args):
    ids, targets, grid = _target_rects(args.target)
    inputs = [args.target]
    if args.pred:
        predicted = _pred_rects(args.pred, len(targets))
        inputs.append(args.pred)
    else:
        if not args.weights:
            raise UsageError("--image needs --weights to supply the subject palette")
        container = load_container(args.weights)
        image = read_image(args.image)
        if image.shape[:2] != grid:
            raise ShapeError(f"image is {image.shape[0]}x{image.shape[1]}, target grid is {grid[0]}x{grid[1]}")
        missing = [i for i in ids if f"palette.{i}" not in container]
        if missing or "palette.background" not in container:
            raise WeightsError(f"palette colors missing for {missing or ['background']}")
        signatures = [container[f"palette.{i}"] for i in ids]
        predicted = localize_subjects(image, signatures, container["palette.background"], args.threshold)
        inputs += [args.image, args.weights]
    score = layout_miou(predicted, targets)
    report = score.to_json()
    report["subjects"] = ids
    report["predicted"] = [None if p is None else p.as_list() for p in predicted]
    if args.format == "json":
        print(json.dumps(report, indent=2))
    else:
        for i, v in zip(ids, score.per_subject_iou):
            print(f"{i:<12} IoU {v:.4f}")
        print(f"{'mIoU':<12}     {score.miou:.4f}")
    return {"subjects": ids, "threshold": args.threshold}, None, inputs, [], None


# --------------------------------------------------------------------------
# inspect-attn


def run_inspect_attn(args):
    trace = AttentionTrace.from_entries(load_container(args.trace))
    paths = attention_heatmap_dump(trace, args.out_dir)
    print(json.dumps({"files": [str(p) for p in paths], "count": len(paths)}, indent=2))
    return {"maps": len(paths)}, None, [args.trace], [str(p) for p in paths], Path(args.out_dir) / "manifest.json"


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layoutfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample an image from a layout spec")
    g.add_argument("--spec", required=True, help="layout spec JSON")
    g.add_argument("--weights", required=True, help="model container (weights + embeddings)")
    g.add_argument("--out", required=True, help="output PPM path")
    g.add_argument("--mode", choices=MODES, help="override the spec's image-stream mode")
    g.add_argument("--steps", type=_positive_int, help="override the number of sampling steps")
    g.add_argument("--seed", type=int, help="override the spec's seed")
    g.add_argument("--image-scale", type=float, help="override the image-stream scale")
    g.add_argument("--guidance", type=float, help="classifier-free guidance scale (0 = off)")
    g.add_argument("--dump-attn", metavar="DIR", help="write attention heatmaps here")
    g.add_argument("--dump-latent", metavar="PATH", help="write z0 as a container")
    g.add_argument("--dump-trace", metavar="PATH", help="write attention maps as a container for inspect-attn")
    g.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    g.set_defaults(func=run_generate)

    t = sub.add_parser("train-toy", help="train the toy denoiser on synthetic canvases")
    t.add_argument("--out", required=True, help="output container path")
    t.add_argument("--epochs", type=_nonneg_int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=_positive_int)
    t.add_argument("--config", help='JSON file with optional "data" and "train" sections')
    t.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    t.set_defaults(func=run_train_toy)

    b = sub.add_parser("bench", help="time crop-and-merge against masked-sum attention")
    b.add_argument("--grid", type=_positive_int, default=64)
    b.add_argument("--subjects", type=_positive_int, default=4)
    b.add_argument("--coverage", type=float, default=0.25, help="total box coverage in (0, 1]")
    b.add_argument("--repeat", type=_positive_int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--tokens", type=_positive_int, default=4, help="adapter tokens per subject")
    b.add_argument("--d-head", type=_positive_int, default=16)
    b.add_argument("--heads", type=_positive_int, default=2)
    b.add_argument("--format", choices=("json", "table"), default="json")
    b.add_argument("--manifest", help="write a run manifest here")
    b.set_defaults(func=run_bench)

    e = sub.add_parser("eval-layout", help="score predicted subject rects against target boxes")
    e.add_argument("--target", required=True, help='JSON with "grid" and "subjects" (id, box)')
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred", help='JSON list (or {"rects": [...]}) of [h_s, h_e, w_s, w_e] or null')
    src.add_argument("--image", help="PPM image to localize subjects in")
    e.add_argument("--weights", help="container holding palette.<id> colors (with --image)")
    e.add_argument("--threshold", type=float, help="reject pixels farther than this from every color")
    e.add_argument("--format", choices=("json", "table"), default="json")
    e.add_argument("--manifest", help="write a run manifest here")
    e.set_defaults(func=run_eval_layout)

    a = sub.add_parser("inspect-attn", help="render attention heatmaps from a dumped trace")
    a.add_argument("--trace", required=True, help="container written by generate --dump-trace")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--manifest", help="manifest path (default: <out-dir>/manifest.json)")
    a.set_defaults(func=run_inspect_attn)
    return parser


def _thread_limit():
    raw = os.environ.get("LAYOUTFUSE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LAYOUTFUSE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"LAYOUTFUSE_THREADS must be >= 0, got {n}")
    return nullcontext() if n == 0 else threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        with _thread_limit():
            config, seed, inputs, outputs, default_manifest = args.func(args)
        manifest_path = _manifest_path(args, default_manifest)
        if manifest_path is not None:
            RunManifest(args.command, argv, config, seed, {p: sha256_file(p) for p in inputs}, outputs,
                        time.perf_counter() - start).write(manifest_path)
    except NumericError as exc:
        print(f"layoutfuse: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpecError, ContainerError, ShapeError, WeightsError, UsageError, ValueError, KeyError) as exc:
        print(f"layoutfuse: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"layoutfuse: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
