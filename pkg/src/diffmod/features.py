"""Hand-crafted per-pixel motion features, point sampling and patch embedding.

Channel layout of a :class:`FeatureField` (``BASE_CHANNELS``)::

    0  intensity I_t
    1  |I_t - I_{t-1}|
    2  |I_t - I_{t+1}|
    3  |I_t - I_{t-2}|
    4  |I_t - I_{t+2}|
    5  3x3 local mean of I_t
    6  3x3 local max of the summed difference map (sum of channels 1-4)
    7  3x3 local variance of the summed difference map

When ``context_scales`` is non-empty, three channels per scale follow: the
summed difference map smoothed with a Gaussian of that width, and its x and
y derivatives multiplied by the width. These give each sampled point a sense
of where motion lies around it, which the eight local channels cannot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import numerics as nx

WINDOW = 5
BASE_CHANNELS = 8
DEFAULT_CONTEXT_SCALES = (3.0, 8.0, 16.0)


class FeatureConfigError(ValueError):
    pass


@dataclass
class FeatureField:
    height: int
    width: int
    data: np.ndarray  # H x W x d_raw
    frame_index: int = 0

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


@dataclass
class GlobalEmbedding:
    features: nx.Tensor  # L_g x d
    region_centers: np.ndarray  # L_g x 2
    stride: int
    grid: tuple[int, int]  # (rows, cols)


def frame_window(frames: np.ndarray, t: int) -> np.ndarray:
    """The 5 frames centred on ``t``; indices past either end repeat the edge frame."""
    T = frames.shape[0]
    idx = np.clip(np.arange(t - WINDOW // 2, t + WINDOW // 2 + 1), 0, T - 1)
    return frames[idx]


def summed_difference(window: np.ndarray) -> np.ndarray:
    cur = window[WINDOW // 2]
    return sum(np.abs(cur - window[i]) for i in range(WINDOW) if i != WINDOW // 2)


def compute_feature_field(window: np.ndarray, frame_index: int = 0,
                          context_scales=DEFAULT_CONTEXT_SCALES) -> FeatureField:
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 3 or window.shape[0] != WINDOW:
        raise FeatureConfigError(f"expected a window of {WINDOW} frames, got shape {window.shape}")
    prev2, prev1, cur, next1, next2 = window
    d1, d2 = np.abs(cur - prev1), np.abs(cur - next1)
    d3, d4 = np.abs(cur - prev2), np.abs(cur - next2)
    dsum = d1 + d2 + d3 + d4
    local_mean = ndimage.uniform_filter(cur, size=3, mode="nearest")
    local_max = ndimage.maximum_filter(dsum, size=3, mode="nearest")
    m1 = ndimage.uniform_filter(dsum, size=3, mode="nearest")
    m2 = ndimage.uniform_filter(dsum * dsum, size=3, mode="nearest")
    local_var = np.maximum(m2 - m1 * m1, 0.0)
    chans = [cur, d1, d2, d3, d4, local_mean, local_max, local_var]
    for s in context_scales:
        sm = ndimage.gaussian_filter(dsum, sigma=s, mode="nearest")
        gy, gx = np.gradient(sm)
        chans += [sm * s / 2.0, gx * s * s, gy * s * s]
    return FeatureField(cur.shape[0], cur.shape[1], np.stack(chans, axis=-1), frame_index)


def feature_channels(context_scales=DEFAULT_CONTEXT_SCALES) -> int:
    return BASE_CHANNELS + 3 * len(context_scales)


def grid_sample(field, coords) -> nx.Tensor:
    """Bilinear samples of ``field`` (H x W x C array or tensor) at L x 2 pixel coords (x, y).

    Coordinates are clamped to the image before interpolation; gradients flow
    to both the field and the (unclamped, in-range) coordinates.
    """
    field_t = field if isinstance(field, nx.Tensor) else nx.Tensor(
        field.data if isinstance(field, FeatureField) else field)
    coords_t = nx.as_tensor(coords)
    F = field_t.data
    H, W = F.shape[0], F.shape[1]
    c = coords_t.data
    x = np.clip(c[:, 0], 0.0, W - 1.0)
    y = np.clip(c[:, 1], 0.0, H - 1.0)
    inside_x = (c[:, 0] >= 0.0) & (c[:, 0] <= W - 1.0)
    inside_y = (c[:, 1] >= 0.0) & (c[:, 1] <= H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 2) if W > 1 else np.zeros_like(x, dtype=np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 2) if H > 1 else np.zeros_like(y, dtype=np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None].astype(F.dtype)
    fy = (y - y0)[:, None].astype(F.dtype)
    v00, v01 = F[y0, x0], F[y0, x1]
    v10, v11 = F[y1, x0], F[y1, x1]
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    out = top + (bot - top) * fy

    def bw(g):
        gfield = None
        if field_t.requires_grad:
            gfield = np.zeros_like(F)
            w00 = (1 - fx) * (1 - fy)
            w01 = fx * (1 - fy)
            w10 = (1 - fx) * fy
            w11 = fx * fy
            for yy, xx, w in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                np.add.at(gfield, (yy, xx), g * w)
        gcoords = None
        if coords_t.requires_grad:
            dx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * g
            dy = (bot - top) * g
            gcoords = np.stack([dx.sum(1) * inside_x, dy.sum(1) * inside_y], axis=1).astype(c.dtype)
        return gfield, gcoords

    return nx.make_op(out, (field_t, coords_t), bw)


class PatchEmbed(nx.Module):
    """Mean-pool each r_g x r_g window of the field, then project to ``d`` channels."""

    def __init__(self, d_raw: int, d: int, rng: np.random.Generator):
        self.proj = nx.Linear(d_raw, d, rng)

    def __call__(self, field: FeatureField, stride: int) -> GlobalEmbedding:
        return patch_embed(field, stride, self.proj)


def pool_regions(data: np.ndarray, stride: int) -> np.ndarray:
    H, W, C = data.shape
    if H % stride or W % stride:
        raise FeatureConfigError(f"field size {H}x{W} is not divisible by stride {stride}")
    rows, cols = H // stride, W // stride
    return data.reshape(rows, stride, cols, stride, C).mean(axis=(1, 3)).reshape(rows * cols, C)


def region_centers(height: int, width: int, stride: int) -> np.ndarray:
    rows, cols = height // stride, width // stride
    ys, xs = np.mgrid[0:rows, 0:cols]
    return np.stack([(xs.ravel() + 0.5) * stride - 0.5, (ys.ravel() + 0.5) * stride - 0.5], axis=1).astype(np.float64)


def patch_embed(field, stride: int, proj: nx.Linear) -> GlobalEmbedding:
    """Global region embeddings F_g, one row per non-overlapping window.

    ``field`` may be a :class:`FeatureField` or an H x W x C tensor (the latter
    keeps the field on the tape, which the gradient checks use).
    """
    if isinstance(field, FeatureField):
        pooled = nx.Tensor(pool_regions(field.data, stride))
        H, W = field.height, field.width
    else:
        t = nx.as_tensor(field)
        H, W, C = t.shape
        if H % stride or W % stride:
            raise FeatureConfigError(f"field size {H}x{W} is not divisible by stride {stride}")
        rows, cols = H // stride, W // stride
        blocks = nx.reshape(t, (rows, stride, cols, stride, C))
        pooled = nx.reshape(nx.mean(blocks, axis=(1, 3)), (rows * cols, C))
    feats = proj(pooled)
    return GlobalEmbedding(feats, region_centers(H, W, stride), stride, (H // stride, W // stride))
