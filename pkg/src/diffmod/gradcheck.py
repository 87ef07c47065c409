"""Finite-difference checks for every differentiable op and for the composed training objective."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import numerics as nx

OP_TOL = 1e-4
OBJECTIVE_TOL = 1e-3


def _t(rng, *shape, lo=-1.0, hi=1.0, away_from=None, margin=0.05):
    x = rng.uniform(lo, hi, size=shape)
    if away_from is not None:
        for k in np.atleast_1d(away_from):
            near = np.abs(x - k) < margin
            x[near] = k + np.copysign(margin, x[near] - k + 1e-300)
    return nx.Tensor(x, requires_grad=True)


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list, tuple]]:
    """(name, fn, inputs, extra params) for each primitive and each model building block."""
    from .conditioning import DimParams, TssParams, dim_transform, tss_scale
    from .features import grid_sample
    from .loss import focal_cls_loss, focal_loss_from_logits, missing_loss, reg_loss
    from .sraa import SraaConfig, SraaLayer
    from .tpgf import GruCell, RegionGrid, TpgfParams, gru_step, scatter_to_regions

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    pos = _t(rng, 3, 4, lo=0.2, hi=2.0)
    m1, m2 = _t(rng, 2, 3, 4), _t(rng, 2, 4, 5)
    idx = np.array([2, 0, 2, 1])
    gidx = rng.integers(0, 4, size=(3, 6))
    cases = [
        ("add", nx.add, [a, b], ()),
        ("sub", nx.sub, [a, b], ()),
        ("mul", nx.mul, [a, b], ()),
        ("div", nx.div, [a, pos], ()),
        ("scale", lambda x: nx.scale(x, -2.5), [a], ()),
        ("add_broadcast", nx.add, [a, _t(rng, 4)], ()),
        ("matmul", nx.matmul, [_t(rng, 3, 4), _t(rng, 4, 2)], ()),
        ("matmul_batched", nx.matmul, [m1, m2], ()),
        ("exp", nx.exp, [a], ()),
        ("log", nx.log, [pos], ()),
        ("sigmoid", nx.sigmoid, [_t(rng, 3, 4, lo=-6, hi=6)], ()),
        ("log_sigmoid", nx.log_sigmoid, [_t(rng, 3, 4, lo=-6, hi=6)], ()),
        ("tanh", nx.tanh, [a], ()),
        ("relu", nx.relu, [_t(rng, 3, 4, away_from=0.0)], ()),
        ("abs", nx.abs_, [_t(rng, 3, 4, away_from=0.0)], ()),
        ("sqrt", nx.sqrt, [pos], ()),
        ("sum", lambda x: nx.sum_(x, axis=1), [a], ()),
        ("mean", lambda x: nx.mean(x, axis=0, keepdims=True), [a], ()),
        ("min", lambda x: nx.min_(x, axis=0), [_t(rng, 5, 3)], ()),
        ("reshape", lambda x: nx.reshape(x, (2, 6)), [a], ()),
        ("transpose", lambda x: nx.transpose(x, (2, 0, 1)), [m1], ()),
        ("concat", lambda x, y: nx.concat([x, y], axis=0), [a, b], ()),
        ("index_rows", lambda x: nx.index(x, idx), [a], ()),
        ("index_slice", lambda x: x[:, 1:3], [a], ()),
        ("gather_last", lambda x: nx.gather_last(x, gidx), [a], ()),
        ("softmax", lambda x: nx.softmax(x, axis=-1), [m1], ()),
        ("softmax_rows", nx.softmax_rows, [a], ()),
        ("layer_norm", nx.layer_norm, [a, _t(rng, 4), _t(rng, 4)], ()),
        ("pairwise_distance", nx.pairwise_distance, [_t(rng, 4, 2, hi=3), _t(rng, 3, 2, hi=3)], ()),
        ("smooth_l1", nx.smooth_l1, [_t(rng, 3, 4, lo=-3, hi=3, away_from=(-1.0, 1.0))], ()),
        ("segment_mean", lambda x: nx.segment_mean(x, np.array([0, 2, 0]), 4)[0], [_t(rng, 3, 4)], ()),
    ]

    field = _t(rng, 6, 7, 3)
    pts = nx.Tensor(rng.uniform(0.3, 5.2, size=(5, 2)), requires_grad=True)
    pts.data = np.floor(pts.data) + np.clip(pts.data - np.floor(pts.data), 0.1, 0.9)
    cases.append(("grid_sample", grid_sample, [field, pts], ()))

    logits = _t(rng, 8, lo=-4, hi=4)
    lbl = np.array([1, 0, 0, 1, 0, 0, 0, 1], dtype=bool)
    cases.append(("focal_logits", lambda x: focal_loss_from_logits(x, lbl), [logits], ()))
    cases.append(("focal_probs", lambda p: focal_cls_loss(p, lbl), [_t(rng, 8, lo=0.05, hi=0.95)], ()))
    gt = rng.uniform(0, 10, size=(3, 2))
    labels = np.array([0, -1, 2, 1, -1])
    cp = nx.Tensor(gt[[0, 0, 2, 1, 1]] + rng.normal(0, 1.5, size=(5, 2)), requires_grad=True)
    cases.append(("reg_loss", lambda c: reg_loss(c, labels, gt, 2.0), [cp], ()))
    cm = nx.Tensor(rng.uniform(0, 10, size=(6, 2)), requires_grad=True)
    cases.append(("missing_loss", lambda c: missing_loss(c, gt, 4.0)[0], [cm], ()))

    d = 8
    cell = GruCell(d, rng)
    cell.astype(np.float64)
    cases.append(("gru_step", lambda x, h: gru_step(x, h, cell), [_t(rng, 4, d), _t(rng, 4, d)],
                  tuple(cell.parameters())))
    dp = DimParams(d, rng, k_dim=3)
    cases.append(("dim_transform", lambda f, c: dim_transform(f, c, dp), [_t(rng, 4, d), _t(rng, 4, d)],
                  tuple(dp.parameters())))
    tp = TssParams(d, rng, emb_dim=8, steps=100)
    tp.out.weight.data = rng.normal(0, 0.3, size=tp.out.weight.shape)  # off the zero init
    cases.append(("tss_scale", lambda f: tss_scale(f, 37, tp), [_t(rng, 4, d)], tuple(tp.parameters())))
    layer = SraaLayer(SraaConfig(alpha=2.0, beta=3, gamma=2.0, heads=2, d=d, ffn_hidden=6), rng)
    ca, cb = rng.uniform(0, 12, size=(5, 2)), rng.uniform(0, 12, size=(4, 2))
    cases.append(("sraa_cross", lambda fa, fb: layer(fa, ca, fb, cb), [_t(rng, 5, d), _t(rng, 4, d)],
                  tuple(layer.parameters())))
    tg = TpgfParams(d, rng, k_dim=3)
    grid = RegionGrid(4, 8, 8)
    cpts = rng.uniform(0, 8, size=(5, 2))
    cases.append(("scatter_to_regions", lambda f: scatter_to_regions(f, cpts, grid, tg.f0), [_t(rng, 5, d)],
                  (tg.f0,)))
    return cases


def micro_objective():
    """A tiny model and 3-frame scene; returns (objective fn, parameters)."""
    from .diffusion import DenoiseConfig
    from .loss import LossWeights
    from .model import DetachedValues, DiffMod, ModelConfig
    from .pipeline import TrainConfig, sequence_loss
    from .scenegen import SceneConfig, generate_scene
    from .sraa import SraaConfig

    scene = generate_scene(SceneConfig(height=16, width=16, frames=3, object_count=(2, 2),
                                       object_size=(1.5, 2.5), speed_min=0.5, speed_max=1.5,
                                       grid_stride=4, accept_radius=2.0, birth_death_prob=0.0, seed=5))
    mc = ModelConfig(denoise=DenoiseConfig(r=2.0, N=2, M=10, K_max=2, S=50),
                     sraa=SraaConfig(alpha=2.0, beta=3, gamma=2.0, heads=2, d=4, ffn_hidden=4),
                     d=4, k_dim=2, context_scales=(3.0,), memory_threshold=0.0, seed=1)
    model = DiffMod(mc)
    model.astype(np.float64)
    rng = np.random.default_rng(0)
    for p in model.parameters():  # move zero-initialized heads off their special point
        if not p.data.any():
            p.data = rng.normal(0, 0.1, size=p.shape)
    tc = TrainConfig(window=3, dtype="float64")
    weights = LossWeights()
    frozen = DetachedValues()

    def objective():
        loss, _ = sequence_loss(model, scene, 0, tc, weights, np.random.default_rng(3), frozen)
        return loss

    return objective, model.parameters()


def run_suite(quick: bool = False, seed: int = 0) -> list[tuple[str, float, float]]:
    """Worst relative error per check, as (name, error, tolerance)."""
    rng = np.random.default_rng(seed)
    results = []
    with nx.using_dtype(np.float64):
        for name, fn, inputs, params in op_cases(rng):
            results.append((name, nx.grad_check(fn, inputs, params=params), OP_TOL))
        if not quick:
            t0 = time.time()
            objective, params = micro_objective()
            err = nx.grad_check(objective, [], step=1e-5, params=params)
            results.append((f"training_objective ({time.time() - t0:.0f}s)", err, OBJECTIVE_TOL))
    return results
