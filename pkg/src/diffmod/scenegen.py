"""Deterministic synthetic moving-object video.

Scenes are grayscale frames with small anisotropic Gaussian blobs that move
at bounded speed over a background of static clutter and per-frame sensor
noise. Frames are quantized to 8 bits at generation time so that the PGM
round trip is lossless.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class SceneConfigError(ValueError):
    pass


class SceneFormatError(ValueError):
    pass


@dataclass
class SceneConfig:
    height: int = 128
    width: int = 128
    frames: int = 12
    object_count: tuple[int, int] = (3, 8)
    object_size: tuple[float, float] = (4.0, 9.0)
    speed_min: float = 1.0
    speed_max: float = 2.0
    contrast: tuple[float, float] = (0.3, 0.6)
    background: float = 0.25
    noise_std: float = 0.05
    clutter_density: float = 0.5
    birth_death_prob: float = 0.15
    grid_stride: int = 32
    accept_radius: float = 4.0
    seed: int = 0

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0 or self.frames <= 0:
            raise SceneConfigError("height, width and frames must be positive")
        if self.height % self.grid_stride or self.width % self.grid_stride:
            raise SceneConfigError(f"H, W must be multiples of the grid stride {self.grid_stride}")
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise SceneConfigError("invalid object_count range")
        if not 0 < self.object_size[0] <= self.object_size[1]:
            raise SceneConfigError("invalid object_size range")
        if not 0 <= self.speed_min <= self.speed_max:
            raise SceneConfigError("invalid speed range")
        if self.speed_max >= self.accept_radius:
            raise SceneConfigError("speed_max must stay below the acceptance radius")
        if self.noise_std < 0 or self.clutter_density < 0:
            raise SceneConfigError("noise_std and clutter_density must be non-negative")
        if not 0 < self.contrast[0] <= self.contrast[1]:
            raise SceneConfigError("invalid contrast range")

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        d = dict(d)
        for key in ("object_count", "object_size", "contrast"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ObjectTrack:
    object_id: int
    centers: np.ndarray  # T x 2, (cx, cy)
    visible: np.ndarray  # T bool

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ObjectTrack)
            and self.object_id == other.object_id
            and np.array_equal(self.centers, other.centers)
            and np.array_equal(self.visible, other.visible)
        )


@dataclass
class SceneSequence:
    config: SceneConfig
    frames: np.ndarray  # T x H x W in [0, 1]
    tracks: list[ObjectTrack] = field(default_factory=list)

    def centers_at(self, t: int) -> np.ndarray:
        """Visible ground-truth centers in frame ``t`` as an m x 2 array."""
        pts = [tr.centers[t] for tr in self.tracks if tr.visible[t]]
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SceneSequence)
            and self.config == other.config
            and np.array_equal(self.frames, other.frames)
            and self.tracks == other.tracks
        )


def _blob(h: int, w: int, cx: float, cy: float, sx: float, sy: float, theta: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))


def _simulate_track(rng: np.random.Generator, cfg: SceneConfig, margin: float) -> tuple[np.ndarray, np.ndarray]:
    T = cfg.frames
    lo_x, hi_x = margin, cfg.width - 1 - margin
    lo_y, hi_y = margin, cfg.height - 1 - margin
    pos = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
    speed = rng.uniform(cfg.speed_min, cfg.speed_max)
    ang = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.cos(ang), np.sin(ang)])
    centers = np.zeros((T, 2))
    for t in range(T):
        centers[t] = pos
        jitter = rng.normal(0.0, 0.1, size=2)
        step = vel + jitter
        norm = np.hypot(*step)
        # the rounding to 3 decimals below can add up to ~1.5e-3 px
        cap = cfg.speed_max - 2e-3
        if norm > cap:
            step *= cap / norm
        nxt = pos + step
        for ax, (lo, hi) in enumerate(((lo_x, hi_x), (lo_y, hi_y))):
            if nxt[ax] < lo or nxt[ax] > hi:
                vel[ax] = -vel[ax]
                step[ax] = -step[ax]
                nxt[ax] = pos[ax] + step[ax]
        pos = np.clip(nxt, [lo_x, lo_y], [hi_x, hi_y])
    centers = np.round(centers, 3)

    visible = np.ones(T, dtype=bool)
    if T > 2 and rng.random() < cfg.birth_death_prob:
        visible[: rng.integers(1, T // 2 + 1)] = False
    if T > 2 and rng.random() < cfg.birth_death_prob:
        visible[T - rng.integers(1, T // 2 + 1):] = False
    if not visible.any():
        visible[T // 2] = True
    return centers, visible


def generate_scene(config: SceneConfig) -> SceneSequence:
    """Render a scene; the output is a pure function of ``config``."""
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    H, W, T = cfg.height, cfg.width, cfg.frames

    background = np.full((H, W), cfg.background)
    n_clutter = int(round(cfg.clutter_density * H * W / 1000.0))
    for _ in range(n_clutter):
        size = rng.uniform(*cfg.object_size)
        amp = rng.uniform(-0.5, 1.0) * cfg.contrast[1]
        background += amp * _blob(H, W, rng.uniform(0, W), rng.uniform(0, H),
                                  size / 2.355 * rng.uniform(0.7, 1.3), size / 2.355 * rng.uniform(0.7, 1.3),
                                  rng.uniform(0, np.pi))

    n_obj = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    margin = cfg.object_size[1] / 2.0
    tracks = []
    shapes = []
    for i in range(n_obj):
        centers, visible = _simulate_track(rng, cfg, margin)
        size_x = rng.uniform(*cfg.object_size)
        size_y = rng.uniform(*cfg.object_size)
        shapes.append((size_x / 2.355, size_y / 2.355, rng.uniform(0, np.pi), rng.uniform(*cfg.contrast)))
        tracks.append(ObjectTrack(i, centers, visible))

    frames = np.empty((T, H, W))
    for t in range(T):
        img = background.copy()
        for tr, (sx, sy, th, amp) in zip(tracks, shapes):
            if tr.visible[t]:
                cx, cy = tr.centers[t]
                img += amp * _blob(H, W, cx, cy, sx, sy, th)
        img += rng.normal(0.0, cfg.noise_std, size=(H, W))
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return SceneSequence(cfg, frames, tracks)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def _write_pgm(path: Path, img: np.ndarray) -> bytes:
    h, w = img.shape
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    blob = f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()
    path.write_bytes(blob)
    return blob


def _read_pgm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5" or tokens[3] != "255":
        raise SceneFormatError(f"{path.name}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob[pos:pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise SceneFormatError(f"{path.name}: truncated pixel data")
    return data.reshape(h, w).astype(np.float64) / 255.0


def write_scene(scene: SceneSequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    frame_names = []
    digest = hashlib.sha256()
    for t, img in enumerate(scene.frames):
        name = f"frame_{t:04d}.pgm"
        digest.update(_write_pgm(d / name, img))
        frame_names.append(name)
    rows = ["frame,object_id,cx,cy,visible"]
    for t in range(scene.frames.shape[0]):
        for tr in scene.tracks:
            cx, cy = tr.centers[t]
            rows.append(f"{t},{tr.object_id},{cx:.3f},{cy:.3f},{int(tr.visible[t])}")
    tracks_blob = ("\n".join(rows) + "\n").encode("ascii")
    (d / "tracks.csv").write_bytes(tracks_blob)
    digest.update(tracks_blob)
    manifest = {
        "config": asdict(scene.config),
        "frames": frame_names,
        "tracks": "tracks.csv",
        "checksum": digest.hexdigest(),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d


def read_scene(directory) -> SceneSequence:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        cfg = SceneConfig.from_dict(manifest["config"])
        names = manifest["frames"]
        checksum = manifest["checksum"]
    except (OSError, KeyError, TypeError, json.JSONDecodeError, SceneConfigError) as exc:
        raise SceneFormatError(f"malformed manifest in {d}: {exc}") from exc
    present = [n for n in names if (d / n).exists()]
    if len(present) != len(names) or len(names) != cfg.frames:
        raise SceneFormatError(
            f"frame count mismatch in {d}: manifest lists {len(names)}, config says {cfg.frames}, "
            f"found {len(present)} on disk"
        )
    digest = hashlib.sha256()
    frames = []
    for n in names:
        digest.update((d / n).read_bytes())
        frames.append(_read_pgm(d / n))
    tracks_blob = (d / manifest.get("tracks", "tracks.csv")).read_bytes()
    digest.update(tracks_blob)
    if digest.hexdigest() != checksum:
        raise SceneFormatError(f"checksum failure in {d}")
    frames = np.stack(frames)
    if frames.shape[1:] != (cfg.height, cfg.width):
        raise SceneFormatError(f"frame size {frames.shape[1:]} does not match config")

    per_obj: dict[int, dict[int, tuple[float, float, bool]]] = {}
    reader = csv.DictReader(tracks_blob.decode("ascii").splitlines())
    if reader.fieldnames != ["frame", "object_id", "cx", "cy", "visible"]:
        raise SceneFormatError(f"bad tracks.csv header: {reader.fieldnames}")
    for row in reader:
        t, oid = int(row["frame"]), int(row["object_id"])
        cx, cy, vis = float(row["cx"]), float(row["cy"]), row["visible"] == "1"
        if not 0 <= t < cfg.frames:
            raise SceneFormatError(f"track row references frame {t} outside the sequence")
        if vis and not (0 <= cx <= cfg.width - 1 and 0 <= cy <= cfg.height - 1):
            raise SceneFormatError(f"track {oid} frame {t}: center ({cx}, {cy}) out of bounds")
        per_obj.setdefault(oid, {})[t] = (cx, cy, vis)
    tracks = []
    for oid in sorted(per_obj):
        rows = per_obj[oid]
        if len(rows) != cfg.frames:
            raise SceneFormatError(f"track {oid} has {len(rows)} rows, expected {cfg.frames}")
        centers = np.array([rows[t][:2] for t in range(cfg.frames)])
        visible = np.array([rows[t][2] for t in range(cfg.frames)])
        tracks.append(ObjectTrack(oid, centers, visible))
    return SceneSequence(cfg, frames, tracks)


def make_dataset(root, n_train: int, n_test: int, base_config: SceneConfig | None = None,
                 seed: int = 0, write: bool = True) -> dict:
    """Generate ``n_train + n_test`` scenes with disjoint derived seeds.

    Returns the manifest (also written to ``root/dataset.json`` when ``write``).
    """
    if n_train < 1 or n_test < 1:
        raise SceneConfigError("n_train and n_test must both be >= 1")
    base = base_config or SceneConfig()
    base.validate()
    children = np.random.SeedSequence(seed).spawn(n_train + n_test)
    root = Path(root) if root is not None else None
    if write and root is None:
        raise ValueError("root is required when write=True")
    scenes = []
    for i, child in enumerate(children):
        split = "train" if i < n_train else "test"
        scene_seed = int(child.generate_state(1, dtype=np.uint32)[0])
        name = f"{split}_{i if split == 'train' else i - n_train:03d}"
        entry = {"name": name, "split": split, "seed": scene_seed, "directory": name}
        if write:
            cfg = SceneConfig(**{**asdict(base), "seed": scene_seed})
            write_scene(generate_scene(cfg), root / name)
        scenes.append(entry)
    manifest = {"base_config": asdict(base), "seed": seed, "n_train": n_train, "n_test": n_test,
                "scenes": scenes}
    if write:
        root.mkdir(parents=True, exist_ok=True)
        (root / "dataset.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def scenes_for_split(manifest: dict, split: str) -> list[SceneConfig]:
    """Scene configs for one split, regenerated in memory without touching disk."""
    base = manifest["base_config"]
    return [SceneConfig.from_dict({**base, "seed": s["seed"]}) for s in manifest["scenes"] if s["split"] == split]


def load_split(root, split: str) -> list[SceneSequence]:
    root = Path(root)
    manifest = json.loads((root / "dataset.json").read_text())
    return [read_scene(root / s["directory"]) for s in manifest["scenes"] if s["split"] == split]
