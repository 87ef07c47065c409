import time

import numpy as np
import pytest

from diffmod import numerics as nx
from diffmod.diffusion import DenoiseConfig
from diffmod.model import DiffMod, ModelConfig, init_points, radius_nms
from diffmod.scenegen import SceneConfig, generate_scene
from diffmod.sraa import SraaConfig


def tiny_cfg(**kw):
    base = dict(denoise=DenoiseConfig(r=2.0, N=2, M=24, S=100), sraa=SraaConfig(heads=2, d=8, ffn_hidden=8),
                d=8, k_dim=4, context_scales=(3.0,), seed=3)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(**kw):
    with nx.using_dtype(np.float64):
        return DiffMod(tiny_cfg(**kw))


SCENE = generate_scene(SceneConfig(height=32, width=32, frames=4, object_count=(2, 3), grid_stride=4,
                                   accept_radius=2.5, speed_max=2.0, seed=8))


def test_init_points():
    p = init_points(500, 128, 96, seed=4)
    assert p.shape == (500, 2)
    assert (p[:, 0] >= 0).all() and (p[:, 0] < 96).all() and (p[:, 1] < 128).all()
    assert np.array_equal(p, init_points(500, 128, 96, seed=4))
    assert ModelConfig().denoise.M == 500


def run_level(model, pts, n=1):
    field = model.field_for(SCENE.frames, 1)
    glob = model.global_features(field, model.initial_state(32, 32))
    return model.forward_level(pts, field, glob, None, model.levels[n - 1], model.ladder[n - 1], n)


def test_single_point_level():
    out = run_level(tiny_model(), np.array([[5.0, 7.0]]))
    assert out.features.shape == (1, 8) and out.coords.shape == (1, 2) and out.logits.shape == (1,)
    assert np.isfinite(out.features.data).all()


def test_zero_regression_keeps_points():
    model = tiny_model()
    pts = init_points(10, 32, 32, seed=1)
    assert np.array_equal(run_level(model, pts).coords.data, pts)


def test_level_permutation_equivariance():
    model = tiny_model()
    for lv in model.levels:
        lv.reg.weight.data = np.random.default_rng(0).normal(size=lv.reg.weight.shape)
    pts = init_points(12, 32, 32, seed=2)
    perm = np.random.default_rng(1).permutation(12)
    a, b = run_level(model, pts), run_level(model, pts[perm])
    assert np.allclose(a.coords.data[perm], b.coords.data)
    assert np.allclose(a.logits.data[perm], b.logits.data)
    assert np.allclose(a.features.data[perm], b.features.data)


def test_single_level_model():
    model = tiny_model(denoise=DenoiseConfig(r=4.0, N=1, M=16, S=100))
    field = model.field_for(SCENE.frames, 0)
    out = model.forward(field, init_points(16, 32, 32))
    assert len(out.levels) == 1


def test_forward_deterministic():
    model = tiny_model()
    field = model.field_for(SCENE.frames, 2)
    pts = init_points(24, 32, 32, seed=9)
    a, b = model.forward(field, pts), model.forward(field, pts)
    for la, lb in zip(a.levels, b.levels):
        assert np.array_equal(la.coords.data, lb.coords.data)
        assert np.array_equal(la.logits.data, lb.logits.data)


def test_default_forward_under_one_second():
    model = DiffMod(ModelConfig())
    model.astype(np.float32)
    scene = generate_scene(SceneConfig(seed=1))
    field = model.field_for(scene.frames, 3)
    pts = init_points(500, 128, 128)
    with nx.no_grad(), nx.using_dtype(np.float32):
        model.forward(field, pts)
        t0 = time.perf_counter()
        model.forward(field, pts)
    assert time.perf_counter() - t0 < 1.0


def test_nms():
    assert radius_nms(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([0.9, 0.8]), 0.5, 4.0) == [0]
    assert radius_nms(np.array([[0.0, 0.0], [9.0, 0.0]]), np.array([0.8, 0.9]), 0.5, 4.0) == [1, 0]
    assert radius_nms(np.zeros((3, 2)), np.array([0.1, 0.2, 0.3]), 0.5, 4.0) == []


def test_infer_empty_still_updates_state():
    model = tiny_model()
    dets, state = model.infer(SCENE.frames, tau=0.999)
    assert all(len(d) == 0 for d in dets)
    # one cold-start update, one per later frame, one folding in the last frame
    assert state.t == SCENE.frames.shape[0] + 1


def test_infer_counts_bounded():
    model = tiny_model()
    dets, _ = model.infer(SCENE.frames, tau=0.005)
    assert all(len(d) <= model.cfg.denoise.M for d in dets)
    assert all(d.confidence >= 0.005 for frame in dets for d in frame)


def test_infer_tau_range():
    with pytest.raises(ValueError):
        tiny_model().infer(SCENE.frames, tau=1.0)


def test_detection_set_invariant_to_point_order(monkeypatch):
    import diffmod.model as mm

    model = tiny_model()
    base = mm.init_points
    ref, _ = model.infer(SCENE.frames, tau=0.005)
    perm = np.random.default_rng(0).permutation(24)
    monkeypatch.setattr(mm, "init_points", lambda *a, **k: base(*a, **k)[perm])
    got, _ = model.infer(SCENE.frames, tau=0.005)
    for a, b in zip(ref, got):
        sa = sorted((round(d.cx, 9), round(d.cy, 9)) for d in a)
        sb = sorted((round(d.cx, 9), round(d.cy, 9)) for d in b)
        assert sa == sb


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model()
    for p in model.parameters():
        p.data = p.data + np.random.default_rng(1).normal(0, 0.1, size=p.shape)
    dets, state = model.infer(SCENE.frames, tau=0.01)
    model.save(tmp_path / "m.ckpt", state=state)
    back, state2, _ = DiffMod.load(tmp_path / "m.ckpt")
    assert np.array_equal(state.h.data, state2.h.data)
    field = model.field_for(SCENE.frames, 1)
    pts = init_points(24, 32, 32)
    with nx.using_dtype(np.float64):
        a = model.forward(field, pts)
        b = back.forward(field, pts)
    for la, lb in zip(a.levels, b.levels):
        assert np.array_equal(la.coords.data, lb.coords.data)
        assert np.array_equal(la.logits.data, lb.logits.data)
