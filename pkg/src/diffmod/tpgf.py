"""Temporal propagation and global fusion.

Point features from the previous frame are averaged into the global region
grid, a GRU turns the region summaries into a hidden state that persists
across frames, and that state modulates the current global embeddings
through a dynamic interaction transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .conditioning import DimParams, dim_transform


@dataclass
class RegionGrid:
    stride: int
    height: int
    width: int

    @property
    def dims(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride

    @property
    def size(self) -> int:
        rows, cols = self.dims
        return rows * cols

    def index(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        x = np.clip(c[:, 0], 0.0, self.width - 1.0)
        y = np.clip(c[:, 1], 0.0, self.height - 1.0)
        cols = self.width // self.stride
        return (np.floor(y / self.stride) * cols + np.floor(x / self.stride)).astype(np.int64)


@dataclass
class TemporalState:
    h: nx.Tensor
    t: int = 0

    @classmethod
    def zeros(cls, n_regions: int, d: int, dtype=np.float64) -> TemporalState:
        return cls(nx.Tensor(np.zeros((n_regions, d), dtype=dtype)), 0)

    def detach(self) -> TemporalState:
        return TemporalState(self.h.detach(), self.t)


class GruCell(nx.Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.gates = nx.Linear(2 * d, 2 * d, rng)  # update and reset, side by side
        self.cand = nx.Linear(2 * d, d, rng)
        self.d = d


def gru_step(x, h_prev, cell: GruCell) -> nx.Tensor:
    x, h_prev = nx.as_tensor(x), nx.as_tensor(h_prev)
    if x.shape != h_prev.shape:
        raise nx.DimensionError(f"input {x.shape} and state {h_prev.shape} differ")
    d = cell.d
    gates = nx.sigmoid(cell.gates(nx.concat([x, h_prev], axis=1)))
    z, r = gates[:, :d], gates[:, d:]
    cand = nx.tanh(cell.cand(nx.concat([x, nx.mul(r, h_prev)], axis=1)))
    return nx.add(nx.mul(nx.sub(1.0, z), h_prev), nx.mul(z, cand))


class TpgfParams(nx.Module):
    def __init__(self, d: int, rng: np.random.Generator, k_dim: int = 16):
        self.f0 = nx.new_param((1, d), rng, init="normal", std=0.02)
        self.gru = GruCell(d, rng)
        self.dim = DimParams(d, rng, k_dim=k_dim)


def scatter_to_regions(F_l, C_l, grid: RegionGrid, f0) -> nx.Tensor:
    """Mean point feature per region; regions without points take ``f0``."""
    F_l = nx.as_tensor(F_l)
    seg = grid.index(C_l)
    means, counts = nx.segment_mean(F_l, seg, grid.size)
    empty = (counts == 0).astype(F_l.dtype)[:, None]
    return nx.add(means, nx.mul(nx.as_tensor(f0), empty))


def fuse_global(F_g, h_t, dim_params: DimParams) -> nx.Tensor:
    return dim_transform(F_g, h_t, dim_params)


def propagate(F_prev, C_prev, state: TemporalState, grid: RegionGrid, params: TpgfParams) -> TemporalState:
    """Advance the hidden state with the previous frame's (already filtered) points."""
    regions = scatter_to_regions(F_prev, C_prev, grid, params.f0)
    return TemporalState(gru_step(regions, state.h, params.gru), state.t + 1)
