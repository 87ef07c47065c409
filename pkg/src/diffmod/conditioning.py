"""Per-token dynamic interaction (DIM) and timestep scaling (TSS)."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx


def timestep_embedding(s, dim: int) -> np.ndarray:
    """Sinusoidal embedding with interleaved sin/cos at frequencies 1 ... 1e-4."""
    if np.any(np.asarray(s) < 0):
        raise ValueError("timestep must be non-negative")
    half = dim // 2
    freqs = np.exp(-math.log(1e4) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(s, dtype=np.float64)[..., None] * freqs
    emb = np.empty(ang.shape[:-1] + (2 * half,))
    emb[..., 0::2] = np.sin(ang)
    emb[..., 1::2] = np.cos(ang)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


def dim_product(F, omega, d: int, k_dim: int) -> nx.Tensor:
    """The bare bilinear map: ``(F_i @ omega1_i) @ omega2_i`` for each token."""
    F, omega = nx.as_tensor(F), nx.as_tensor(omega)
    L = F.shape[0]
    w1 = nx.reshape(omega[:, : d * k_dim], (L, d, k_dim))
    w2 = nx.reshape(omega[:, d * k_dim:], (L, k_dim, d))
    hid = nx.matmul(nx.reshape(F, (L, 1, d)), w1)
    return nx.reshape(nx.matmul(hid, w2), (L, d))


class DimParams(nx.Module):
    """Estimates per-token projection factors from a conditioning token."""

    def __init__(self, d: int, rng: np.random.Generator, k_dim: int = 16, d_cond: int | None = None):
        d_cond = d if d_cond is None else d_cond
        self.d, self.k_dim = d, k_dim
        self.estimator = nx.Linear(d_cond, 2 * k_dim * d, rng)
        self.norm1 = nx.LayerNorm(k_dim)
        self.norm2 = nx.LayerNorm(d)


def dim_transform(F, cond, params: DimParams) -> nx.Tensor:
    F, cond = nx.as_tensor(F), nx.as_tensor(cond)
    if F.shape[0] != cond.shape[0]:
        raise nx.DimensionError("need one conditioning token per feature token")
    if F.shape[1] != params.d:
        raise nx.DimensionError(f"feature dim {F.shape[1]} != {params.d}")
    d, k = params.d, params.k_dim
    L = F.shape[0]
    omega = params.estimator(cond)
    w1 = nx.reshape(omega[:, : d * k], (L, d, k))
    w2 = nx.reshape(omega[:, d * k:], (L, k, d))
    hid = nx.reshape(nx.matmul(nx.reshape(F, (L, 1, d)), w1), (L, k))
    hid = nx.relu(params.norm1(hid))
    out = nx.reshape(nx.matmul(nx.reshape(hid, (L, 1, k)), w2), (L, d))
    return nx.add(params.norm2(out), F)


class TssParams(nx.Module):
    def __init__(self, d: int, rng: np.random.Generator, emb_dim: int = 64, steps: int = 1000):
        self.emb_dim, self.steps = emb_dim, steps
        self.time = nx.Linear(emb_dim, d, rng)
        self.out = nx.Linear(d, 2 * d, rng, zero=True)


def tss_scale(F, s: int, params: TssParams) -> nx.Tensor:
    """``F * (1 + scale(s)) + shift(s)`` broadcast over tokens."""
    if not 1 <= s <= params.steps:
        raise ValueError(f"timestep {s} outside 1..{params.steps}")
    F = nx.as_tensor(F)
    emb = nx.Tensor(timestep_embedding(np.array([s]), params.emb_dim).astype(F.dtype))
    ss = params.out(nx.relu(params.time(emb)))
    d = F.shape[1]
    sc, sh = ss[:, :d], ss[:, d:]
    return nx.add(nx.mul(F, nx.add(sc, 1.0)), sh)
