"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py`` (the lines appear in the terminal
summary) or ``python3 tests/test_acceptance.py`` to print them directly.
Criterion 7 needs the trained toy model and takes several minutes.
"""

import dataclasses
import json
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from conftest import conditions, disjoint_boxes, gradient_check, random_box, random_weights  # noqa: E402
from layoutfuse.ablation import run_ablation  # noqa: E402
from layoutfuse.attention import (decoupled_block, local_image_cross_attention,  # noqa: E402
                                  masked_sum_image_cross_attention)
from layoutfuse.bench import run_benchmark  # noqa: E402
from layoutfuse.cli import main  # noqa: E402
from layoutfuse.diffusion.sampler import sample  # noqa: E402
from layoutfuse.diffusion.schedule import ddim_step, forward_diffuse, make_schedule, timesteps  # noqa: E402
from layoutfuse.layout import build_region_assignment, masks_from_layout  # noqa: E402
from layoutfuse.metrics import flop_count  # noqa: E402
from layoutfuse.numerics import count_ops, scaled_dot_attention  # noqa: E402
from layoutfuse.tensorio import read_container, save_container, write_container  # noqa: E402

RESULTS: dict[int, str] = {}
G = 16


def report(number: int, passed: bool, detail: str) -> None:
    RESULTS[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(RESULTS[number])
    assert passed, RESULTS[number]


def acceptance_weights(rng, layers=1):
    return random_weights(rng, layers=layers, heads=2, d_head=16, d_cond=8)


def head_queries(Z, block, layer=0):
    return np.concatenate([Z @ block.wq[layer, h] for h in range(block.heads)], axis=1)


# --------------------------------------------------------------------- 1


def test_criterion_1_variant_equivalence():
    start = time.process_time()
    worst, exact = 0.0, True
    for case in range(100):
        rng = np.random.default_rng(case)
        config, block, adapter = acceptance_weights(rng)
        subjects = conditions(rng, disjoint_boxes(rng, int(rng.integers(1, 5)), G), d_cond=8)
        Z = rng.standard_normal((G * G, config.d_model))
        a = build_region_assignment(subjects, G, G)
        anyms = local_image_cross_attention(Z, subjects, a, 0, block, adapter)
        masked = masked_sum_image_cross_attention(Z, subjects, masks_from_layout(subjects, G, G), 0, block, adapter)
        covered = a.winner.reshape(-1) >= 0
        rel = np.abs(anyms[covered] - masked[covered]) / np.maximum(np.abs(masked[covered]), 1e-300)
        worst = max(worst, float(rel.max()))
        exact &= bool(np.array_equal(anyms[~covered], head_queries(Z, block)[~covered]))
        exact &= not masked[~covered].any()
    elapsed = time.process_time() - start
    report(1, worst < 1e-10 and exact and elapsed < 30,
           f"max relative diff {worst:.2e} (< 1e-10), exteriors exact={exact}, {elapsed:.1f} s CPU (< 30)")


# --------------------------------------------------------------------- 2


def overlapping_layout(rng):
    """Redraw until at least two boxes share a cell."""
    while True:
        boxes = [random_box(rng, G, 3, 10) for _ in range(int(rng.integers(2, 5)))]
        masks = masks_from_layout([SimpleNamespace(box=b, priority=0) for b in boxes], G, G)
        if (np.sum(masks, axis=0) > 1).any():
            return boxes


def test_criterion_2_priority():
    worst, rows_checked, tie_rows = 0.0, 0, 0
    for case in range(100):
        rng = np.random.default_rng(1000 + case)
        config, block, adapter = acceptance_weights(rng)
        boxes = overlapping_layout(rng)
        # Small priority range so ties (smallest index wins) occur regularly.
        priorities = [int(p) for p in rng.integers(0, 2, len(boxes))]
        subjects = conditions(rng, boxes, d_cond=8, priorities=priorities)
        Z = rng.standard_normal((G * G, config.d_model))
        a = build_region_assignment(subjects, G, G)
        out = local_image_cross_attention(Z, subjects, a, 0, block, adapter)
        cover = np.stack(masks_from_layout(subjects, G, G)).sum(axis=0).reshape(-1)
        for j, s in enumerate(subjects):
            rect_rows = s.rect(G, G).flat_indices(G)
            crop = np.concatenate([
                scaled_dot_attention(Z[rect_rows] @ block.wq[0, h], s.embedding @ adapter.wk[0, h],
                                     s.embedding @ adapter.wv[0, h]) for h in range(config.heads)], axis=1)
            standalone = dict(zip(rect_rows.tolist(), crop))
            for r in a.winner_indices(j):
                if cover[r] > 1:
                    worst = max(worst, float(np.abs(out[r] - standalone[int(r)]).max()))
                    rows_checked += 1
                    contenders = [k for k, t in enumerate(subjects) if t.rect(G, G).contains(r // G, r % G)]
                    top = max(subjects[k].priority for k in contenders)
                    winners = [k for k in contenders if subjects[k].priority == top]
                    tie_rows += len(winners) > 1
                    assert j == min(winners)
    report(2, worst < 1e-12 and rows_checked > 0,
           f"max abs diff {worst:.2e} (< 1e-12) over {rows_checked} overlap rows, {tie_rows} resolved by tie rule")


# --------------------------------------------------------------------- 3


def test_criterion_3_locality():
    violations, changed_everywhere = 0, True
    for trial in range(50):
        rng = np.random.default_rng(2000 + trial)
        config, block, adapter = acceptance_weights(rng)
        n = int(rng.integers(2, 5))
        subjects = conditions(rng, [random_box(rng, G, 2, 10) for _ in range(n)], d_cond=8,
                              priorities=[int(p) for p in rng.integers(0, 3, n)])
        Z = rng.standard_normal((G * G, config.d_model))
        a = build_region_assignment(subjects, G, G)
        j = int(rng.integers(n))
        before = local_image_cross_attention(Z, subjects, a, 0, block, adapter)
        edited = list(subjects)
        edited[j] = dataclasses.replace(subjects[j], embedding=subjects[j].embedding + rng.standard_normal(
            subjects[j].embedding.shape))
        after = local_image_cross_attention(Z, edited, a, 0, block, adapter)
        mine = a.winner.reshape(-1) == j
        violations += int(before[~mine].tobytes() != after[~mine].tobytes())
        if mine.any():
            changed_everywhere &= bool((before[mine] != after[mine]).any(axis=1).all())
    report(3, violations == 0 and changed_everywhere,
           f"{violations} of 50 trials changed rows outside the edited subject's winner pixels")


# --------------------------------------------------------------------- 4


def test_criterion_4_normalization(toy_assets):
    worst, rows = 0.0, 0
    layout = [("red", (0.0, 0.0, 0.5, 0.625), 1), ("green", (0.375, 0.25, 1.0, 0.75), 0),
              ("blue", (0.125, 0.5, 0.625, 1.0), 2)]
    for mode in ("anyms", "masked-sum", "global-sum"):
        spec = toy_assets.layout_spec(layout, seed=4, steps=50, mode=mode, guidance=1.5)
        result = sample(spec, toy_assets.model, toy_assets.schedule, trace=True)
        assert result.model_evaluations == 100
        worst = max(worst, result.trace.max_row_sum_error())
        rows += sum(len(r[-1]) for r in result.trace.row_sums)
    report(4, worst < 1e-9, f"max |row sum - 1| {worst:.2e} (< 1e-9) over {rows} softmax rows, 50 steps x 3 modes")


# --------------------------------------------------------------------- 5


def test_criterion_5_sampler_inversion():
    worst = {}
    schedule = make_schedule(200)
    for steps in (10, 50):
        worst[steps] = 0.0
        for seed in range(5):
            rng = np.random.default_rng(seed)
            z0 = rng.uniform(-1, 1, (16, 16, 3))
            ts = timesteps(schedule.T, steps)
            z = forward_diffuse(z0, ts[0], rng.standard_normal(z0.shape), schedule)
            for i, t in enumerate(ts):
                ab = schedule.alpha_bar(t)
                oracle = (z - np.sqrt(ab) * z0) / np.sqrt(1 - ab)
                z = ddim_step(z, oracle, t, ts[i + 1] if i + 1 < len(ts) else 0, schedule)
            worst[steps] = max(worst[steps], float(np.abs(z - z0).max()))
    report(5, max(worst.values()) < 1e-8, f"max |z - z0|: 10 steps {worst[10]:.2e}, 50 steps {worst[50]:.2e} (< 1e-8)")


# --------------------------------------------------------------------- 6


def test_criterion_6_gradient_check():
    start = time.process_time()
    errors, n_params = gradient_check(seed=0)
    elapsed = time.process_time() - start
    worst = max(errors.values())
    report(6, worst < 1e-4 and n_params <= 5000 and elapsed < 60,
           f"max relative error {worst:.2e} (< 1e-4), {n_params} parameters, {elapsed:.1f} s CPU (< 60)")


# --------------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_ablation_ordering(toy_assets):
    result = run_ablation(toy_assets, cases=50, n_subjects=3, seed=0, steps=50)
    a, m, g = (result.mean(x) for x in ("anyms", "masked-sum", "global-sum"))
    p = result.baseline_pvalue("global-sum")
    report(7, a > m > g and p >= 0.05,
           f"mIoU anyms {a:.3f} > masked-sum {m:.3f} > global-sum {g:.3f}; "
           f"global-sum vs random boxes {result.baseline_mean():.3f}, p={p:.2f} (>= 0.05)")


# --------------------------------------------------------------------- 8


def test_criterion_8_flops_and_bench():
    mismatches = 0
    for trial in range(20):
        rng = np.random.default_rng(3000 + trial)
        layers = int(rng.integers(1, 3))
        heads, d_head, d_cond = int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(2, 7))
        config, block, adapter = random_weights(rng, layers=layers, heads=heads, d_head=d_head, d_cond=d_cond)
        grid = int(rng.integers(4, 17))
        n = int(rng.integers(0, 5))
        subjects = conditions(rng, [random_box(rng, grid, 1, grid) for _ in range(n)], d_cond=d_cond,
                              priorities=[int(p) for p in rng.integers(0, 3, n)])
        c_t = rng.standard_normal((int(rng.integers(1, 4)), d_cond))
        Z = rng.standard_normal((grid * grid, config.d_model))
        for mode in ("anyms", "masked-sum", "global-sum", "text-only"):
            with count_ops() as ops:
                for layer in range(layers):
                    decoupled_block(Z, c_t, subjects, (grid, grid), mode, layer, 1, block, adapter, config)
            expected = flop_count(mode, subjects, (grid, grid), config, [s.embedding.shape[0] for s in subjects],
                                  text_tokens=c_t.shape[0])
            mismatches += ops.madds != expected.total
    timings = []
    for n, coverage in ((2, 0.5), (2, 0.25), (4, 0.25), (4, 0.5), (3, 0.1)):
        r = run_benchmark(grid=64, subjects=n, coverage=coverage, repeat=20, seed=0)
        timings.append((n, coverage, r.anyms_median / r.masked_median))
    slow = [t for t in timings if t[2] >= 1.0]
    detail = ", ".join(f"n={n} f={f}: {ratio:.2f}" for n, f, ratio in timings)
    report(8, mismatches == 0 and not slow,
           f"{mismatches} FLOP mismatches over 20 configs x 4 modes; anyms/masked-sum median time {detail}")


# --------------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path, toy_assets):
    save_container(tmp_path / "w.lft", toy_assets.to_entries())
    layout = [("red", (0.0, 0.0, 0.5, 0.5), 0), ("cyan", (0.25, 0.5, 0.875, 1.0), 1)]
    (tmp_path / "spec.json").write_text(json.dumps(toy_assets.layout_spec(layout, seed=9, steps=50).to_json()))
    codes = [main(["generate", "--spec", str(tmp_path / "spec.json"), "--weights", str(tmp_path / "w.lft"),
                   "--out", str(tmp_path / f"{k}.ppm")]) for k in "ab"]
    same_image = codes == [0, 0] and (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    rng = np.random.default_rng(9)
    mixed = {"f64": rng.standard_normal((3, 4)), "f32": rng.standard_normal(5).astype(np.float32),
             "cube": rng.standard_normal((2, 2, 2)).astype(np.float32), "scalar": np.float64(3.5),
             "empty": np.zeros((0, 3))}
    blobs = [write_container(mixed), (tmp_path / "w.lft").read_bytes()]
    same_container = all(write_container(read_container(b)) == b for b in blobs)
    report(9, same_image and same_container,
           f"generate byte-identical={same_image}, container round-trips byte-identical={same_container}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
