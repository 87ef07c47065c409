"""The progressive point-denoising detector."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .conditioning import DimParams, TssParams, dim_transform, tss_scale
from .diffusion import DenoiseConfig, NoiseSchedule, build_schedule, level_timestep
from .features import (DEFAULT_CONTEXT_SCALES, FeatureField, compute_feature_field, feature_channels,
                       frame_window, grid_sample, patch_embed)
from .sraa import SraaConfig, SraaLayer
from .tpgf import RegionGrid, TemporalState, TpgfParams, fuse_global, propagate


@dataclass
class ModelConfig:
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    sraa: SraaConfig = field(default_factory=SraaConfig)
    d: int = 64
    k_dim: int = 16
    context_scales: tuple[float, ...] = DEFAULT_CONTEXT_SCALES
    tau: float = 0.5
    r_nms: float | None = None  # defaults to denoise.r
    memory_threshold: float = 0.3
    tpgf_enabled: bool = True
    seed: int = 0

    @property
    def nms_radius(self) -> float:
        return self.r_nms if self.r_nms is not None else self.denoise.r

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_scales"] = list(self.context_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        den = DenoiseConfig(**d.pop("denoise", {}))
        sr = SraaConfig(**d.pop("sraa", {}))
        if "context_scales" in d:
            d["context_scales"] = tuple(d["context_scales"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(denoise=den, sraa=sr, **d)


@dataclass
class LevelOutput:
    features: nx.Tensor  # L_p x d
    coords: nx.Tensor  # L_p x 2
    logits: nx.Tensor  # L_p
    inputs: np.ndarray  # L_p x 2, the points this level consumed
    level: int
    timestep: int

    @property
    def probs(self) -> np.ndarray:
        return nx._sigmoid_np(self.logits.data)


@dataclass
class FrameOutput:
    levels: list[LevelOutput]
    state: TemporalState


class DetachedValues:
    """Values that cross a stop-gradient boundary, recorded on first use and replayed after.

    Finite-difference checks of the full objective need this: perturbing a
    parameter must not move the (gradient-free) inputs of later levels.
    """

    def __init__(self):
        self.store: dict = {}

    def __call__(self, key, value):
        return self.store.setdefault(key, value)


def _passthrough(key, value):
    return value


@dataclass
class Detection:
    cx: float
    cy: float
    confidence: float
    frame: int


class LevelBlock(nx.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d
        self.srca = SraaLayer(cfg.sraa, rng)
        self.srsa = SraaLayer(cfg.sraa, rng)
        self.dim = DimParams(d, rng, k_dim=cfg.k_dim)
        self.tss = TssParams(d, rng, emb_dim=d, steps=cfg.denoise.S)
        self.cls = nx.Linear(d, 1, rng)
        self.reg = nx.Linear(d, 2, rng, zero=True)
        # rare-positive prior for the classifier
        self.cls.bias.data[:] = -np.log((1 - 0.01) / 0.01)


class DiffMod(nx.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        cfg.denoise.validate()
        cfg.sraa.validate()
        if cfg.sraa.d != cfg.d:
            raise ValueError("sraa.d must equal d")
        rng = np.random.default_rng(cfg.seed)
        d_raw = feature_channels(cfg.context_scales)
        self.point_proj = nx.Linear(d_raw, cfg.d, rng)
        self.patch_proj = nx.Linear(d_raw, cfg.d, rng)
        self.levels = [LevelBlock(cfg, rng) for _ in range(cfg.denoise.N)]
        self.tpgf = TpgfParams(cfg.d, rng, k_dim=cfg.k_dim)
        self.cfg = cfg
        self.schedule: NoiseSchedule = build_schedule(cfg.denoise.S)
        self.ladder = [level_timestep(n, cfg.denoise.N, self.schedule) for n in range(1, cfg.denoise.N + 1)]

    # -- helpers -----------------------------------------------------------
    def offset_scale(self, n: int) -> float:
        """Pixel scale of level ``n``'s regression output: the noise radius it is expected to remove."""
        den = self.cfg.denoise
        return den.r * 2 ** (den.N - n + 1) / 2

    def field_for(self, frames: np.ndarray, t: int) -> FeatureField:
        return compute_feature_field(frame_window(frames, t), t, self.cfg.context_scales)

    def grid(self, height: int, width: int) -> RegionGrid:
        return RegionGrid(self.cfg.denoise.r_g, height, width)

    def initial_state(self, height: int, width: int, dtype=None) -> TemporalState:
        g = self.grid(height, width)
        dtype = dtype or self.point_proj.weight.dtype
        return TemporalState.zeros(g.size, self.cfg.d, dtype)

    # -- forward -----------------------------------------------------------
    def forward_level(self, points: np.ndarray, field: FeatureField, glob, F_prev, block: LevelBlock,
                      s_n: int, n: int, field_data: np.ndarray | None = None) -> LevelOutput:
        dtype = self.point_proj.weight.dtype
        pts = np.asarray(points, dtype=dtype)
        fd = field_data if field_data is not None else field.data.astype(dtype)
        F = self.point_proj(grid_sample(fd, pts))
        if F_prev is None:
            F_prev = F
        F = block.srca(F, pts, glob.features, glob.region_centers)
        F = block.srsa(F, pts, F, pts)
        F = dim_transform(F, F_prev, block.dim)
        F = tss_scale(F, s_n, block.tss)
        logits = nx.reshape(block.cls(F), (pts.shape[0],))
        offset = nx.scale(block.reg(F), self.offset_scale(n))
        coords = nx.add(offset, pts)
        return LevelOutput(F, coords, logits, pts, n, s_n)

    def global_features(self, field: FeatureField, state: TemporalState | None, field_data=None):
        fd = field_data if field_data is not None else field.data.astype(self.patch_proj.weight.dtype)
        glob = patch_embed(FeatureField(field.height, field.width, fd, field.frame_index),
                           self.cfg.denoise.r_g, self.patch_proj)
        if self.cfg.tpgf_enabled and state is not None:
            glob.features = fuse_global(glob.features, state.h, self.tpgf.dim)
        return glob

    def advance_state(self, state: TemporalState, prev: FrameOutput | None, height: int, width: int,
                      frozen=_passthrough) -> TemporalState:
        """h_t from the previous frame's confident final-level points (none on a cold start)."""
        if not self.cfg.tpgf_enabled:
            return state
        grid = self.grid(height, width)
        if prev is None:
            F = nx.Tensor(np.zeros((0, self.cfg.d), dtype=state.h.dtype))
            C = np.zeros((0, 2))
        else:
            last = prev.levels[-1]
            key = ("memory", state.t)
            keep = frozen(key + ("keep",), np.nonzero(last.probs >= self.cfg.memory_threshold)[0])
            F = nx.index(last.features, keep)
            C = frozen(key + ("coords",), last.coords.data[keep])
        return propagate(F, C, state, grid, self.tpgf)

    def forward(self, field: FeatureField, points: np.ndarray, state: TemporalState | None = None,
                timesteps: list[int] | None = None, prev: FrameOutput | None = None,
                frozen=None) -> FrameOutput:
        """All N level outputs for one frame.

        ``state`` is the hidden state after frame t-1 and ``prev`` that frame's
        output; both None means a cold start. ``frozen`` (a
        :class:`DetachedValues`) pins everything computed without gradient.
        """
        frozen = frozen or _passthrough
        H, W = field.height, field.width
        if state is None:
            state = self.initial_state(H, W)
        state = self.advance_state(state, prev, H, W, frozen)
        fd = field.data.astype(self.point_proj.weight.dtype)
        glob = self.global_features(field, state, fd)
        steps = timesteps or self.ladder
        outs: list[LevelOutput] = []
        pts = np.asarray(points)
        F_prev = None
        for n, block in enumerate(self.levels, start=1):
            out = self.forward_level(pts, field, glob, F_prev, block, steps[n - 1], n, fd)
            outs.append(out)
            pts = frozen(("points", field.frame_index, n), out.coords.data)
            F_prev = out.features
        return FrameOutput(outs, state)

    # -- inference ---------------------------------------------------------
    def infer(self, frames: np.ndarray, tau: float | None = None, r_nms: float | None = None,
              seed: int = 0, state: TemporalState | None = None):
        """Detections for every frame of a sequence plus the final temporal state."""
        tau = self.cfg.tau if tau is None else tau
        r_nms = self.cfg.nms_radius if r_nms is None else r_nms
        if not 0 < tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        T, H, W = frames.shape
        dets: list[list[Detection]] = []
        prev = None
        with nx.no_grad():
            for t in range(T):
                field = self.field_for(frames, t)
                pts = init_points(self.cfg.denoise.M, H, W, seed=(seed, t))
                out = self.forward(field, pts, state, prev=prev)
                state, prev = out.state, out
                last = out.levels[-1]
                keep = radius_nms(last.coords.data, last.probs, tau, r_nms)
                dets.append([Detection(float(last.coords.data[i, 0]), float(last.coords.data[i, 1]),
                                       float(last.probs[i]), t) for i in keep])
            # fold the last frame into the memory so a resumed stream continues correctly
            if prev is not None:
                state = self.advance_state(state, prev, H, W)
        return dets, state

    # -- persistence ---------------------------------------------------------
    def save(self, path, extra: dict | None = None, state: TemporalState | None = None) -> None:
        arrays = dict(self.state_dict())
        if state is not None:
            arrays["__state__.h"] = state.h.data
        cfg = {"model": self.cfg.to_dict(), **(extra or {})}
        if state is not None:
            cfg["state_t"] = state.t
        nx.save_checkpoint(path, arrays, cfg)

    @classmethod
    def load(cls, path) -> tuple[DiffMod, TemporalState | None, dict]:
        arrays, cfg = nx.load_checkpoint(path)
        model = cls(ModelConfig.from_dict(cfg["model"]))
        h = arrays.pop("__state__.h", None)
        model.load_state_dict(arrays)
        state = TemporalState(nx.Tensor(h), cfg.get("state_t", 0)) if h is not None else None
        return model, state, cfg


def init_points(M: int, height: int, width: int, seed=0) -> np.ndarray:
    """M points uniform over [0, W) x [0, H)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng(seed if not isinstance(seed, tuple) else list(seed))
    return rng.uniform(0.0, 1.0, size=(M, 2)) * np.array([width, height], dtype=np.float64)


def radius_nms(coords: np.ndarray, probs: np.ndarray, tau: float, radius: float) -> list[int]:
    """Greedy suppression: keep the most confident point, drop others within ``radius``, repeat."""
    coords = np.asarray(coords)
    probs = np.asarray(probs)
    cand = np.nonzero(probs >= tau)[0]
    order = cand[np.argsort(-probs[cand], kind="stable")]
    kept: list[int] = []
    for i in order:
        if kept:
            d = np.hypot(*(coords[kept] - coords[i]).T)
            if np.any(d <= radius):
                continue
        kept.append(int(i))
    return kept
