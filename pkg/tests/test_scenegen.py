import hashlib
import json

import numpy as np
import pytest

from diffmod.scenegen import (SceneConfig, SceneConfigError, SceneFormatError, generate_scene, make_dataset,
                              read_scene, write_scene)


def small(**kw):
    base = dict(height=64, width=64, frames=6, seed=3)
    base.update(kw)
    return SceneConfig(**base)


def test_deterministic():
    a, b = generate_scene(small()), generate_scene(small())
    assert np.array_equal(a.frames, b.frames)
    assert a == b


def test_forced_count():
    assert len(generate_scene(small(object_count=(3, 3))).tracks) == 3


@pytest.mark.parametrize("seed", range(10))
def test_speed_bound(seed):
    scene = generate_scene(SceneConfig(seed=seed, speed_max=2.0))
    for tr in scene.tracks:
        vis = tr.visible[:-1] & tr.visible[1:]
        steps = np.hypot(*np.diff(tr.centers, axis=0).T)[vis]
        assert steps.max(initial=0) <= 2.0


@pytest.mark.parametrize("seed", range(5))
def test_blob_contrast(seed):
    cfg = SceneConfig(seed=seed, noise_std=0.0, clutter_density=0.0)
    scene = generate_scene(cfg)
    for t in range(cfg.frames):
        for cx, cy in scene.centers_at(t):
            v = scene.frames[t, int(round(cy)), int(round(cx))]
            assert v - cfg.background >= cfg.contrast[0] / 2 - 1 / 255


def test_invalid_config():
    with pytest.raises(SceneConfigError):
        SceneConfig(height=100).validate()
    with pytest.raises(SceneConfigError):
        SceneConfig(speed_max=5.0).validate()


def test_round_trip(tmp_path):
    scene = generate_scene(SceneConfig(seed=11))
    write_scene(scene, tmp_path / "s")
    assert read_scene(tmp_path / "s") == scene


def test_missing_frame(tmp_path):
    scene = generate_scene(small())
    d = write_scene(scene, tmp_path / "s")
    sorted(d.glob("*.pgm"))[-1].unlink()
    with pytest.raises(SceneFormatError, match="frame count mismatch"):
        read_scene(d)


def test_out_of_bounds_track(tmp_path):
    scene = generate_scene(small(object_count=(2, 2), birth_death_prob=0.0))
    d = write_scene(scene, tmp_path / "s")
    lines = (d / "tracks.csv").read_text().splitlines()
    parts = lines[1].split(",")
    parts[2] = "999.0"
    lines[1] = ",".join(parts)
    (d / "tracks.csv").write_text("\n".join(lines) + "\n")
    manifest = json.loads((d / "manifest.json").read_text())
    digest = hashlib.sha256()
    for name in manifest["frames"]:
        digest.update((d / name).read_bytes())
    digest.update((d / "tracks.csv").read_bytes())
    manifest["checksum"] = digest.hexdigest()
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(SceneFormatError, match="out of bounds"):
        read_scene(d)


def test_checksum_failure(tmp_path):
    d = write_scene(generate_scene(small()), tmp_path / "s")
    f = sorted(d.glob("*.pgm"))[0]
    raw = bytearray(f.read_bytes())
    raw[-1] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(SceneFormatError, match="checksum"):
        read_scene(d)


def test_dataset_counts(tmp_path):
    m1 = make_dataset(tmp_path / "a", 64, 8, SceneConfig(), 7, write=False)
    m2 = make_dataset(tmp_path / "b", 64, 8, SceneConfig(), 7, write=False)
    assert len(m1["scenes"]) == 72
    assert sum(s["split"] == "train" for s in m1["scenes"]) == 64
    assert sum(s["split"] == "test" for s in m1["scenes"]) == 8
    assert m1 == m2


def test_dataset_needs_test_split(tmp_path):
    with pytest.raises(SceneConfigError):
        make_dataset(tmp_path, 4, 0, SceneConfig(), 7, write=False)
