"""Progressive MinK optimal-transport assignment of noisy points to targets.

Every target first collects ``k_min`` samples in disjoint rounds (each round
gives every target one more sample, resolving samples claimed twice in
favour of the closer target). Any sample still unassigned that lies within
``r_thre`` of a target then goes to its nearest target.

All argmins break ties toward the lowest index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

SCHEDULES = ("exponential", "linear")


@dataclass
class AssignConfig:
    k: int
    n: int
    N: int
    r: float
    schedule_kind: str = "exponential"

    def validate(self) -> None:
        if not 1 <= self.n <= self.N:
            raise ValueError(f"level {self.n} outside 1..{self.N}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.schedule_kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule_kind!r}")


@dataclass
class AssignmentMatrix:
    match: np.ndarray  # L_p x L_gt bool
    cost: np.ndarray  # L_p x L_gt distances
    complete: bool = True  # False when the sample supply ran out before k_min rounds

    def labels(self) -> np.ndarray:
        """Matched target per sample, -1 for background."""
        if self.match.shape[1] == 0:
            return np.full(self.match.shape[0], -1, dtype=np.int64)
        return np.where(self.match.any(1), self.match.argmax(1), -1)


def schedule_params(cfg: AssignConfig) -> tuple[int, float]:
    """(k_min, r_thre) for level ``cfg.n``.

    Exponential halves both per level; linear steps them down in equal
    increments, with ``r' = r * 2**N / N``.
    """
    cfg.validate()
    k, n, N, r = cfg.k, cfg.n, cfg.N, cfg.r
    if cfg.schedule_kind == "exponential":
        return max(1, k // 2 ** (n - 1)), r * 2 ** (N - n + 1)
    r_lin = r * 2 ** N / N
    return max(1, k * (N - n + 1) // N), r_lin * (N - n + 1)


def distance_cost(C_noise, C_gt) -> np.ndarray:
    a = np.asarray(C_noise, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(C_gt, dtype=np.float64).reshape(-1, 2)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def resolve_conflicts(match: np.ndarray, cost: np.ndarray) -> np.ndarray:
    """Samples matched to several targets keep only the cheapest of those targets."""
    match = np.asarray(match, dtype=bool).copy()
    multi = match.sum(1) > 1
    if multi.any():
        rows = np.nonzero(multi)[0]
        masked = np.where(match[rows], cost[rows], np.inf)
        keep = np.argmin(masked, axis=1)
        match[rows] = False
        match[rows, keep] = True
    return match


def _ota(cost: np.ndarray, k_min: int, r_thre: float | None) -> AssignmentMatrix:
    L_p, L_gt = cost.shape
    match_all = np.zeros((L_p, L_gt), dtype=bool)
    if L_gt == 0 or L_p == 0:
        return AssignmentMatrix(match_all, cost, complete=L_gt == 0)
    work = cost.copy()
    complete = True
    for _ in range(k_min):
        match_ki = np.zeros_like(match_all)
        cap = L_gt + 1
        while True:
            unmatched = np.nonzero(match_ki.sum(0) == 0)[0]
            if unmatched.size == 0:
                break
            sub = work[:, unmatched]
            if not np.isfinite(sub).any():
                complete = False
                break
            cap -= 1
            if cap < 0:
                raise RuntimeError("assignment loop failed to make progress")
            ids = np.argmin(sub, axis=0)
            ok = np.isfinite(sub[ids, np.arange(unmatched.size)])
            match_ki[ids[ok], unmatched[ok]] = True
            match_ki = resolve_conflicts(match_ki, work)
            work[match_ki.any(1), :] = np.inf
        match_all |= match_ki
        if not complete:
            log.warning("sample supply exhausted: %d samples for %d targets x %d rounds", L_p, L_gt, k_min)
            break
    if r_thre is not None:
        match_d = work <= r_thre
        match_d = resolve_conflicts(match_d, work)
        match_all |= match_d
    return AssignmentMatrix(resolve_conflicts(match_all, cost), cost, complete)


def mink_ota(C_noise, C_gt, cfg: AssignConfig) -> AssignmentMatrix:
    k_min, r_thre = schedule_params(cfg)
    return _ota(distance_cost(C_noise, C_gt), k_min, r_thre)


def mink_ota_step3(C_noise, C_gt, k_min: int) -> AssignmentMatrix:
    """Only the round-based part, without the radius step."""
    return _ota(distance_cost(C_noise, C_gt), k_min, None)


def simota_baseline(C_noise, C_gt, r_thre: float) -> AssignmentMatrix:
    """One nearest sample per target plus the radius step."""
    return _ota(distance_cost(C_noise, C_gt), 1, r_thre)


def assign(C_noise, C_gt, cfg: AssignConfig, kind: str = "mink") -> AssignmentMatrix:
    if kind == "mink":
        return mink_ota(C_noise, C_gt, cfg)
    if kind == "simota":
        return simota_baseline(C_noise, C_gt, schedule_params(cfg)[1])
    raise ValueError(f"unknown assignment kind {kind!r}")
