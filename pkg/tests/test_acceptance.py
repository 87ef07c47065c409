"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

Criteria 6-8 need trained models. By default they read the results written by
``scripts/run_experiments.py`` (``runs/results.json``, or the path in
``DIFFMOD_RESULTS``); with ``DIFFMOD_ACCEPTANCE_FULL=1`` the experiments run
first, which takes hours on one CPU core.
"""

import itertools
import json
import logging
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from diffmod import gradcheck
from diffmod.assign import AssignConfig, distance_cost, mink_ota, mink_ota_step3, schedule_params
from diffmod.cli import plot_rows
from diffmod.diffusion import DenoiseConfig
from diffmod.loss import miss_bounds, missing_penalty
from diffmod.model import DiffMod, ModelConfig, init_points
from diffmod.pipeline import TrainConfig, train
from diffmod.scenegen import SceneConfig, generate_scene, read_scene, write_scene
from diffmod.sraa import SraaConfig, quantize_distance

ROOT = Path(__file__).resolve().parents[1]
RESULTS = Path(os.environ.get("DIFFMOD_RESULTS", ROOT / "runs" / "results.json"))


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def recorded(section: str):
    if os.environ.get("DIFFMOD_ACCEPTANCE_FULL") == "1" and not RESULTS.exists():
        import runpy

        runpy.run_path(str(ROOT / "scripts" / "run_experiments.py"), run_name="__main__")
    if not RESULTS.exists():
        return None
    return json.loads(RESULTS.read_text()).get(section)


def test_criterion_1_gradients():
    t0 = time.process_time()
    results = gradcheck.run_suite()
    cpu = time.process_time() - t0
    bad = [(name, err) for name, err, tol in results if not err < tol]
    worst_op = max(err for name, err, tol in results if tol == gradcheck.OP_TOL)
    obj = [err for name, err, tol in results if tol == gradcheck.OBJECTIVE_TOL][0]
    report(1, not bad and cpu < 120,
           f"{len(results)} checks, worst op err {worst_op:.2e} (<1e-4), objective err {obj:.2e} (<1e-3), "
           f"{cpu:.0f}s CPU (<120s), failures {bad}")


def test_criterion_2_distance_quantizer():
    cfg = SraaConfig(alpha=16.0, beta=8, gamma=8.0)
    xs = [0, 8, 16, 32, 128, 10**6]
    got = [quantize_distance(float(x), cfg) for x in xs]
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1000, 10**5)
    b = rng.uniform(0, 1000, 10**5)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    mono = bool(np.all(quantize_distance(lo, cfg) <= quantize_distance(hi, cfg)))
    report(2, got == [0, 0, 1, 3, 8, 8] and mono, f"g={got}, monotone over 1e5 pairs: {mono}")


def greedy_matching_cost(cost: np.ndarray) -> float:
    """Repeatedly take the globally cheapest remaining (sample, target) pair."""
    cost = cost.astype(np.float64).copy()
    total = 0.0
    for _ in range(min(cost.shape)):
        i, j = np.unravel_index(np.argmin(cost), cost.shape)
        total += cost[i, j]
        cost[i, :] = np.inf
        cost[:, j] = np.inf
    return total


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Cheapest matching that pairs every target (or every sample, if fewer) with a distinct partner."""
    n_p, n_g = cost.shape
    if n_g <= n_p:
        return min(sum(cost[p, g] for g, p in enumerate(perm)) for perm in itertools.permutations(range(n_p), n_g))
    return min(sum(cost[p, g] for p, g in enumerate(perm)) for perm in itertools.permutations(range(n_g), n_p))


def test_criterion_3_assignment(caplog):
    caplog.set_level(logging.ERROR, logger="diffmod")
    rng = np.random.default_rng(2024)
    row_ok = supply_ok = True
    oracle_hits, optimal_hits, n_oracle, first_miss = 0, 0, 0, None
    for _ in range(1000):
        L_p, L_gt = int(rng.integers(1, 41)), int(rng.integers(1, 9))
        k, n = int(rng.integers(1, 11)), int(rng.integers(1, 5))
        p, g = rng.uniform(0, 128, (L_p, 2)), rng.uniform(0, 128, (L_gt, 2))
        cfg = AssignConfig(k, n, 4, 4.0)
        k_min, _ = schedule_params(cfg)
        res = mink_ota(p, g, cfg)
        row_ok &= bool(res.match.sum(1).max() <= 1)
        if L_p >= k_min * L_gt:
            supply_ok &= bool(res.match.sum(0).min() >= k_min)
    for _ in range(1000):
        L_p, L_gt = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        p, g = rng.uniform(0, 32, (L_p, 2)), rng.uniform(0, 32, (L_gt, 2))
        cost = distance_cost(p, g)
        got = float(cost[mink_ota_step3(p, g, 1).match].sum())
        want = greedy_matching_cost(cost)
        optimal_hits += math.isclose(got, brute_force_min_cost(cost), rel_tol=1e-9, abs_tol=1e-9)
        n_oracle += 1
        if math.isclose(got, want, rel_tol=1e-9, abs_tol=1e-9):
            oracle_hits += 1
        elif first_miss is None:
            first_miss = (round(got, 4), round(float(want), 4))
    hand1 = mink_ota([(0, 0), (10, 0), (100, 0)], [(1, 0), (99, 0)], AssignConfig(1, 4, 4, 4.0)).match.tolist()
    hand2 = mink_ota_step3([(0, 0), (5, 0)], [(-1, 0), (1, 0)], 1).match.tolist()
    hands = hand1 == [[True, False], [False, False], [False, True]] and hand2 == [[True, False], [False, True]]
    ok = row_ok and supply_ok and hands and oracle_hits == n_oracle
    report(3, ok, f"row sums <=1: {row_ok}; supply: {supply_ok}; hand traces: {hands}; "
                  f"greedy-oracle total-cost agreement {oracle_hits}/{n_oracle} (first mismatch step3 vs oracle: "
                  f"{first_miss}); agreement with the exact optimum {optimal_hits}/{n_oracle}")


def test_criterion_4_schedules():
    exp = [schedule_params(AssignConfig(10, n, 4, 4.0, "exponential")) for n in range(1, 5)]
    lin = [schedule_params(AssignConfig(10, n, 4, 4.0, "linear")) for n in range(1, 5)]
    ok = exp == [(10, 64), (5, 32), (2, 16), (1, 8)] and lin == [(10, 64), (7, 48), (5, 32), (2, 16)]
    report(4, ok, f"exponential {exp}, linear {lin}")


def test_criterion_5_missing_loss():
    ratios = [0.5, 1.0, 1.5, math.inf]
    printed = [-5.46e-5, 6.615e-3, 0.69295, 9.21034]
    got = [float(missing_penalty(r)) for r in ratios]
    oracle = [-math.log(1.0 / (1.0 + math.exp(-(1.5 - r) * 10.0)) + 1e-4) if math.isfinite(r) else -math.log(1e-4)
              for r in ratios]
    diffs = [abs(a - b) for a, b in zip(got, printed)]
    lo, hi = miss_bounds()
    sweep = missing_penalty(np.random.default_rng(0).uniform(0, 50, 10**5))
    bounded = bool(np.all((sweep >= lo) & (sweep <= hi)))
    oracle_ok = all(abs(a - b) < 1e-12 for a, b in zip(got, oracle))
    ok = all(d < 1e-6 for d in diffs) and bounded and oracle_ok
    report(5, ok, f"values {[f'{v:.7g}' for v in got]} vs printed {printed}: |diff| {[f'{d:.1e}' for d in diffs]} "
                  f"(<1e-6); independent oracle agrees: {oracle_ok}; bounds hold: {bounded}")


def test_criterion_6_end_to_end():
    res = recorded("end_to_end")
    if res is None:
        report(6, False, f"no recorded results at {RESULTS}; run scripts/run_experiments.py")
    runs = ", ".join(f"seed {r['seed']}: F1 {r['F1']:.3f} in {r['train_cpu_s'] / 60:.1f} min" for r in res["runs"])
    ok = len(res["runs"]) >= 3 and all(r["F1"] >= 0.80 and r["train_cpu_s"] <= 45 * 60 for r in res["runs"])
    report(6, ok, f"{runs} (need F1>=0.80 within 45 min CPU for every seed)")


def test_criterion_7_ablations():
    res = recorded("ablations")
    expected = ("assignment", "missing_loss", "scheduling", "tpgf")
    if not res or any(k not in res for k in expected):
        report(7, False, f"ablation results incomplete at {RESULTS}")
    parts, ok = [], True
    for kind in expected:
        r = res[kind]
        n_seeds = len({row["seed"] for row in r["rows"]})
        good = r["delta"] > 0 and n_seeds >= 3
        if kind == "tpgf":
            good = good and r["jitter_delta"] < 0
            parts.append(f"tpgf dPr {r['delta']:+.3f}, djitter {r['jitter_delta']:+.3f}")
        else:
            parts.append(f"{kind} d{r['metric']} {r['delta']:+.3f}")
        ok &= good
    report(7, ok, "; ".join(parts) + " (every delta must improve)")


def test_criterion_8_contraction():
    res = recorded("contraction")
    if res is None:
        report(8, False, f"no recorded contraction statistics at {RESULTS}")
    frac = res["fraction_nonincreasing"]
    levels = ", ".join(f"{d:.2f}" for d in res["mean_by_level"])
    report(8, frac >= 0.95, f"nonincreasing in {frac:.1%} of {res['frames']} frames (>=95%); mean by level [{levels}]")


def _tiny():
    return ModelConfig(denoise=DenoiseConfig(r=2.0, N=2, M=24, S=100), sraa=SraaConfig(heads=2, d=8, ffn_hidden=8),
                       d=8, k_dim=4, context_scales=(3.0,), seed=5)


def test_criterion_9_determinism(tmp_path):
    scenes = [generate_scene(SceneConfig(height=32, width=32, frames=4, grid_stride=4, accept_radius=2.5,
                                         speed_max=2.0, seed=s)) for s in range(2)]
    logs = []
    for rep in range(2):
        model = DiffMod(_tiny())
        train(model, scenes, TrainConfig(iterations=4, batch_size=2, warmup=1, dtype="float64", seed=3, log_every=0),
              log_path=tmp_path / f"log{rep}.jsonl")
        logs.append((tmp_path / f"log{rep}.jsonl").read_bytes())
    logs_ok = logs[0] == logs[1]
    model.save(tmp_path / "m.ckpt")
    back, _, _ = DiffMod.load(tmp_path / "m.ckpt")
    field = model.field_for(scenes[0].frames, 2)
    pts = init_points(24, 32, 32)
    a, b = model.forward(field, pts), back.forward(field, pts)
    ckpt_ok = all(np.array_equal(x.coords.data, y.coords.data) and np.array_equal(x.logits.data, y.logits.data)
                  for x, y in zip(a.levels, b.levels))
    scene = generate_scene(SceneConfig(seed=11))
    scene_ok = read_scene(write_scene(scene, tmp_path / "scene")) == scene
    report(9, logs_ok and ckpt_ok and scene_ok,
           f"bit-identical logs: {logs_ok}; checkpoint forward exact: {ckpt_ok}; scene round trip: {scene_ok}")


def test_criterion_10_plot_shapes():
    _, gx = plot_rows("gx")
    g = [row[1] for row in gx]
    g_ok = all(a <= b for a, b in zip(g, g[1:])) and g[-1] == 8 and len(set(g)) > 2 \
        and all(v == 8 for x, v in gx if x >= 128)
    _, lm = plot_rows("lmiss")
    v = np.array([float(row[1]) for row in lm])
    steps = np.diff(v)
    mid = len(v) // 2
    sigmoidal = steps[mid - 20:mid + 20].max() > 10 * max(steps[:20].max(), steps[-20:].max())
    l_ok = bool(np.all(steps >= 0)) and abs(v[-1] - 9.21) < 0.01 and sigmoidal
    report(10, g_ok and l_ok, f"gx monotone step curve saturating at {g[-1]}: {g_ok}; "
                              f"lmiss monotone, sigmoidal, ends at {v[-1]:.4f}: {l_ok}")
