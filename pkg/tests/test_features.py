import numpy as np
import pytest

from diffmod import numerics as nx
from diffmod.features import (BASE_CHANNELS, FeatureConfigError, FeatureField, compute_feature_field,
                              frame_window, grid_sample, patch_embed)
from diffmod.scenegen import SceneConfig, generate_scene

MOTION = [1, 2, 3, 4, 6, 7]


def test_static_scene_has_no_motion():
    frames = np.repeat(np.random.default_rng(0).uniform(size=(1, 32, 32)), 5, axis=0)
    field = compute_feature_field(frames)
    assert np.all(field.data[..., MOTION] == 0)
    assert np.all(field.data[..., BASE_CHANNELS:] == 0)


@pytest.mark.parametrize("seed", range(20))
def test_summed_difference_peaks_at_compact_blob(seed):
    # wider blobs peak on a ring about one sigma out, where the temporal gradient is steepest
    cfg = SceneConfig(height=64, width=64, frames=8, object_count=(1, 1), object_size=(4.0, 5.0), noise_std=0.0,
                      clutter_density=0.0, birth_death_prob=0.0, speed_min=1.5, seed=seed)
    scene = generate_scene(cfg)
    t = 4
    field = compute_feature_field(frame_window(scene.frames, t), t)
    y, x = np.unravel_index(np.argmax(field.data[..., 6]), field.data.shape[:2])
    cx, cy = scene.centers_at(t)[0]
    assert np.hypot(x - cx, y - cy) <= 2.0


def test_edge_padding():
    frames = np.random.default_rng(0).uniform(size=(3, 8, 8))
    w = frame_window(frames, 0)
    assert np.array_equal(w[0], frames[0]) and np.array_equal(w[1], frames[0])
    assert np.array_equal(frame_window(frames, 2)[4], frames[2])


def test_wrong_window():
    with pytest.raises(FeatureConfigError):
        compute_feature_field(np.zeros((3, 8, 8)))


def test_translation_equivariance():
    rng = np.random.default_rng(1)
    frames = rng.uniform(size=(5, 48, 48))
    shifted = np.roll(frames, (3, 5), axis=(1, 2))
    a = compute_feature_field(frames, context_scales=()).data
    b = compute_feature_field(shifted, context_scales=()).data
    band = 8
    assert np.allclose(np.roll(a, (3, 5), axis=(0, 1))[band:-band, band:-band], b[band:-band, band:-band])


def test_grid_sample_lattice_and_midpoint():
    data = np.random.default_rng(2).normal(size=(6, 7, 3))
    out = grid_sample(data, np.array([[2.0, 3.0], [2.5, 3.0], [-10.0, -10.0], [0.0, 0.0]])).data
    assert np.array_equal(out[0], data[3, 2])
    assert np.allclose(out[1], (data[3, 2] + data[3, 3]) / 2)
    assert np.array_equal(out[2], out[3])


def test_grid_sample_linear_between_lattice():
    data = np.random.default_rng(3).normal(size=(5, 5, 2))
    xs = np.linspace(1.0, 2.0, 11)
    out = grid_sample(data, np.stack([xs, np.full_like(xs, 2.0)], 1)).data
    assert np.allclose(np.diff(out, 2, axis=0), 0, atol=1e-12)


def test_patch_embed_region_count(rng):
    proj = nx.Linear(4, 8, rng)
    emb = patch_embed(FeatureField(128, 128, np.ones((128, 128, 4))), 32, proj)
    assert emb.features.shape == (16, 8)
    assert np.allclose(emb.features.data, emb.features.data[0])


@pytest.mark.parametrize("h,w,s", [(64, 32, 16), (96, 128, 32), (8, 8, 4)])
def test_patch_embed_count_invariant(h, w, s, rng):
    emb = patch_embed(FeatureField(h, w, np.zeros((h, w, 2))), s, nx.Linear(2, 3, rng))
    assert emb.features.shape[0] == (h // s) * (w // s)


def test_patch_embed_divisibility(rng):
    with pytest.raises(FeatureConfigError):
        patch_embed(FeatureField(30, 32, np.zeros((30, 32, 2))), 8, nx.Linear(2, 3, rng))


def test_patch_embed_gradcheck(rng, f64):
    proj = nx.Linear(3, 2, rng)
    field = nx.Tensor(rng.normal(size=(8, 8, 3)), requires_grad=True)
    head = rng.normal(size=(2,))

    def fn(f):
        return nx.sum_(nx.mul(patch_embed(f, 4, proj).features, head))

    assert nx.grad_check(fn, [field], params=proj.parameters()) < 1e-4


def test_grid_sample_gradcheck(rng):
    field = nx.Tensor(rng.normal(size=(6, 6, 2)), requires_grad=True)
    pts = nx.Tensor(np.array([[1.3, 2.6], [4.2, 0.7], [3.5, 3.5]]), requires_grad=True)
    assert nx.grad_check(grid_sample, [field, pts]) < 1e-4
