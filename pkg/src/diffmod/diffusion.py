"""Noise schedule, training-time point corruption and the level/timestep ladder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class DenoiseConfig:
    r: float = 4.0
    N: int = 4
    M: int = 500
    rho: float = 0.25
    K_max: int = 10
    S: int = 1000

    @property
    def R(self) -> float:
        return self.r * 2 ** self.N

    @property
    def r_g(self) -> int:
        return int(round(self.r * 2 ** (self.N - 1)))

    def validate(self) -> None:
        if self.r <= 0 or self.N < 1 or self.M < 1 or self.S < 2:
            raise ValueError("need r > 0, N >= 1, M >= 1, S >= 2")


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def S(self) -> int:
        return len(self.betas)

    def sigma(self, s: int) -> float:
        """Noise magnitude at 1-based timestep ``s``."""
        return float(self.sigmas[s - 1])

    def alpha_bar(self, s: int) -> float:
        return float(self.alpha_bars[s - 1])


def build_schedule(S: int = 1000, kind: str = "cosine") -> NoiseSchedule:
    if S < 2:
        raise ValueError("schedule needs S >= 2")
    if kind == "cosine":
        x = np.linspace(0, S, S + 1)
        ab = np.cos(((x / S) + 0.008) / 1.008 * math.pi * 0.5) ** 2
        ab = ab / ab[0]
        betas = np.clip(1 - ab[1:] / ab[:-1], 1e-8, 0.999)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, S)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas, alphas, alpha_bars, np.sqrt(1.0 - alpha_bars))


def replication_count(M: int, m_gt: int, rho: float = 0.25, K_max: int = 10) -> int:
    """Copies of each ground-truth center: ``min(K_max, floor(rho * M / m_gt))``."""
    if m_gt <= 0:
        return 0
    return max(0, min(K_max, int(math.floor(rho * M / m_gt))))


@dataclass
class CorruptedPointSet:
    coords: np.ndarray  # M x 2
    provenance: np.ndarray  # M ints: -1 background, i replica of target i
    timestep: int
    replicas: int


def corrupt_points(C_gt, cfg: DenoiseConfig, schedule: NoiseSchedule, s: int, seed,
                   height: int, width: int) -> CorruptedPointSet:
    """Level-1 training inputs: noisy replicas of every target plus uniform background points."""
    if not 1 <= s <= schedule.S:
        raise ValueError(f"timestep {s} outside 1..{schedule.S}")
    C_gt = np.asarray(C_gt, dtype=np.float64).reshape(-1, 2)
    m = C_gt.shape[0]
    rng = np.random.default_rng(seed)
    k = replication_count(cfg.M, m, cfg.rho, cfg.K_max)
    if m and k * m > cfg.M:
        k = cfg.M // m
        log.warning("replicas exceed point budget; reducing k to %d", k)
    bound = schedule.sigma(s) * cfg.R
    n_rep = k * m
    rep = np.repeat(C_gt, k, axis=0) + rng.uniform(-bound, bound, size=(n_rep, 2))
    bg = rng.uniform(0.0, 1.0, size=(cfg.M - n_rep, 2)) * np.array([width, height])
    coords = np.concatenate([rep, bg], axis=0)
    prov = np.concatenate([np.repeat(np.arange(m), k), np.full(cfg.M - n_rep, -1)])
    return CorruptedPointSet(coords, prov.astype(np.int64), s, k)


def level_timestep(n: int, N: int, schedule: NoiseSchedule) -> int:
    """Timestep whose noise magnitude matches what level ``n`` is expected to receive."""
    if not 1 <= n <= N:
        raise ValueError(f"level {n} outside 1..{N}")
    if n == 1:
        return schedule.S
    hits = np.nonzero(schedule.sigmas >= 2.0 ** (1 - n))[0]
    return int(hits[0]) + 1 if hits.size else schedule.S
