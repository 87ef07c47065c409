"""Training objective: focal classification, Smooth-L1 regression and the missing-target penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx


@dataclass
class LossWeights:
    cls: float = 2.0
    reg: float = 5.0
    miss: float = 4.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    miss_gamma: float = 10.0
    miss_eps: float = 1e-4

    def validate(self) -> None:
        vals = (self.cls, self.reg, self.focal_alpha, self.miss_gamma, self.miss_eps)
        if any(v <= 0 for v in vals) or self.miss < 0 or self.focal_gamma < 0:
            raise ValueError("loss weights must be positive")


@dataclass
class LevelLoss:
    level: int
    cls: nx.Tensor
    reg: nx.Tensor
    miss: nx.Tensor
    r_thre: float
    n_gt: int = 0
    n_missed: int = 0

    def total(self, w: LossWeights) -> nx.Tensor:
        return nx.add(nx.add(nx.scale(self.cls, w.cls), nx.scale(self.reg, w.reg)), nx.scale(self.miss, w.miss))


@dataclass
class LossBreakdown:
    levels: list[LevelLoss] = field(default_factory=list)
    total: nx.Tensor | None = None

    def as_dict(self, w: LossWeights) -> dict:
        out = {"total": float(self.total.data) if self.total is not None else 0.0}
        for lv in self.levels:
            out[f"l{lv.level}"] = {
                "cls": float(lv.cls.data), "reg": float(lv.reg.data), "miss": float(lv.miss.data),
                "total": float(lv.total(w).data), "n_gt": lv.n_gt, "n_missed": lv.n_missed,
            }
        return out


def focal_cls_loss(P, positive, alpha: float = 0.25, gamma: float = 2.0) -> nx.Tensor:
    """Focal loss on probabilities ``P``; normalized by the positive count (at least 1)."""
    P = nx.as_tensor(P)
    pos = np.asarray(positive, dtype=bool).reshape(P.shape)
    ypos = pos.astype(P.dtype)
    one = nx.as_tensor(np.ones((), dtype=P.dtype))
    q = nx.sub(one, P)
    term_pos = nx.mul(nx.mul(nx.mul(q, q) if gamma == 2 else nx.exp(nx.scale(nx.log(q), gamma)), nx.log(P)),
                      alpha * ypos)
    pw = nx.mul(P, P) if gamma == 2 else nx.exp(nx.scale(nx.log(P), gamma))
    term_neg = nx.mul(nx.mul(pw, nx.log(q)), (1 - alpha) * (1 - ypos))
    total = nx.neg(nx.sum_(nx.add(term_pos, term_neg)))
    return nx.scale(total, 1.0 / max(1, int(pos.sum())))


def focal_loss_from_logits(logits, positive, alpha: float = 0.25, gamma: float = 2.0) -> nx.Tensor:
    """Same value as :func:`focal_cls_loss` on ``sigmoid(logits)``, stable for saturated logits."""
    x = nx.as_tensor(logits)
    pos = np.asarray(positive, dtype=bool).reshape(x.shape)
    ypos = pos.astype(x.dtype)
    logp = nx.log_sigmoid(x)
    logq = nx.log_sigmoid(nx.neg(x))
    p = nx.sigmoid(x)
    q = nx.sigmoid(nx.neg(x))
    if gamma == 2:
        qg, pg = nx.mul(q, q), nx.mul(p, p)
    else:
        qg, pg = nx.exp(nx.scale(logq, gamma)), nx.exp(nx.scale(logp, gamma))
    term = nx.add(nx.mul(nx.mul(qg, logp), alpha * ypos), nx.mul(nx.mul(pg, logq), (1 - alpha) * (1 - ypos)))
    return nx.scale(nx.neg(nx.sum_(term)), 1.0 / max(1, int(pos.sum())))


def reg_loss(C_pred, labels: np.ndarray, C_gt, r_thre: float) -> nx.Tensor:
    """Smooth-L1 on matched offsets in units of ``r_thre``, averaged over matched points.

    ``labels[i]`` is the target index matched to point ``i`` or -1.
    """
    C_pred = nx.as_tensor(C_pred)
    labels = np.asarray(labels)
    rows = np.nonzero(labels >= 0)[0]
    if rows.size == 0:
        return nx.mul(nx.sum_(C_pred), 0.0)
    tgt = np.asarray(C_gt, dtype=C_pred.dtype).reshape(-1, 2)[labels[rows]]
    diff = nx.scale(nx.sub(nx.index(C_pred, rows), tgt), 1.0 / r_thre)
    return nx.scale(nx.sum_(nx.smooth_l1(diff)), 1.0 / rows.size)


def missing_penalty(ratio, gamma2: float = 10.0, eps: float = 1e-4):
    """Per-target penalty as a function of ``dist_min / r_thre`` (numpy, for plotting and checks)."""
    z = (1.5 - np.asarray(ratio, dtype=np.float64)) * gamma2
    with np.errstate(over="ignore", invalid="ignore"):
        sig = np.where(np.isinf(z), np.where(z > 0, 1.0, 0.0), 1.0 / (1.0 + np.exp(-z)))
    return -np.log(sig + eps)


def missing_loss(C_points, C_gt, r_thre: float, gamma2: float = 10.0, eps: float = 1e-4,
                 candidates: np.ndarray | None = None) -> tuple[nx.Tensor, int]:
    """Mean penalty over targets on the distance to their nearest point.

    ``candidates`` optionally restricts, per target, which points count (an
    L_p x L_gt bool mask, e.g. the assignment); targets with no candidate
    fall back to all points. Returns (loss, number of targets whose nearest
    point lies beyond ``r_thre``).
    """
    C_points = nx.as_tensor(C_points)
    gt = np.asarray(C_gt, dtype=C_points.dtype).reshape(-1, 2)
    if gt.shape[0] == 0:
        return nx.mul(nx.sum_(C_points), 0.0), 0
    dist = nx.pairwise_distance(C_points, nx.Tensor(gt))
    if candidates is not None:
        mask = np.asarray(candidates, dtype=bool)
        mask = mask | ~mask.any(0, keepdims=True)
        dist = nx.add(dist, np.where(mask, 0.0, 1e12).astype(C_points.dtype))
    dmin = nx.min_(dist, axis=0)
    z = nx.scale(nx.sub(1.5, nx.scale(dmin, 1.0 / r_thre)), gamma2)
    per = nx.neg(nx.log(nx.add(nx.sigmoid(z), eps)))
    n_missed = int((dmin.data > r_thre).sum())
    return nx.mean(per), n_missed


def total_loss(levels: list[LevelLoss], weights: LossWeights) -> nx.Tensor:
    out = None
    for lv in levels:
        t = lv.total(weights)
        out = t if out is None else nx.add(out, t)
    return out if out is not None else nx.Tensor(0.0)


def miss_bounds(eps: float = 1e-4) -> tuple[float, float]:
    return -math.log(1 + eps), -math.log(eps)
