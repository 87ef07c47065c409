"""Spatial relation aggregation attention.

Attention between two point sets whose weights combine ordinary multi-head
dot-product attention with a relational branch. The relational branch maps
each query feature onto a small table of learned distance-bucket encodings
and reads off the logit for every key according to how far apart the two
points are.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx


@dataclass
class SraaConfig:
    alpha: float = 16.0
    beta: int = 8
    gamma: float = 8.0
    heads: int = 4
    d: int = 64
    ffn_hidden: int = 128

    def validate(self) -> None:
        if self.alpha <= 0 or self.gamma <= 1 or self.beta < 1:
            raise ValueError("need alpha > 0, gamma > 1, beta >= 1")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")


def quantize_distance(x, cfg: SraaConfig | None = None):
    """Bucket index of a pixel distance; works on scalars and arrays.

    Distances up to ``alpha`` map linearly (``floor(x / alpha)``, so 0 or 1);
    beyond that the index grows with ``log_gamma(x / alpha)`` and saturates at
    ``beta``.
    """
    cfg = cfg or SraaConfig()
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise nx.DomainError("distance must be non-negative")
    near = np.floor(arr / cfg.alpha)
    with np.errstate(divide="ignore"):
        far = np.floor(1.0 + np.log(np.maximum(arr, cfg.alpha) / cfg.alpha) / math.log(cfg.gamma) * (cfg.beta - 1))
    out = np.where(arr <= cfg.alpha, near, np.minimum(cfg.beta, far)).astype(np.int64)
    if np.ndim(x) == 0:
        return int(out)
    return out


def relation_weights(f_a, eta) -> nx.Tensor:
    """Similarity of each query feature to every bucket encoding: ``f_a @ eta.T``."""
    f_a, eta = nx.as_tensor(f_a), nx.as_tensor(eta)
    if f_a.shape[-1] != eta.shape[-1]:
        raise nx.DimensionError(f"feature dim {f_a.shape[-1]} != encoding dim {eta.shape[-1]}")
    return nx.matmul(f_a, nx.transpose(eta))


def gather_relation(w, buckets: np.ndarray) -> nx.Tensor:
    """``W[i, j] = w[i, buckets[i, j]]``."""
    w = nx.as_tensor(w)
    buckets = np.asarray(buckets, dtype=np.int64)
    if buckets.shape[0] != w.shape[0]:
        raise nx.DimensionError("bucket rows must match weight rows")
    return nx.gather_last(w, buckets)


class SraaLayer(nx.Module):
    def __init__(self, cfg: SraaConfig, rng: np.random.Generator):
        cfg.validate()
        d = cfg.d
        self.eta = nx.new_param((cfg.beta + 1, d), rng)
        self.q = nx.Linear(d, d, rng)
        self.k = nx.Linear(d, d, rng)
        self.v = nx.Linear(d, d, rng)
        self.o = nx.Linear(d, d, rng)
        self.norm = nx.LayerNorm(d)
        self.ff1 = nx.Linear(d, cfg.ffn_hidden, rng)
        self.ff2 = nx.Linear(cfg.ffn_hidden, d, rng)
        self.norm2 = nx.LayerNorm(d)
        self.cfg = cfg

    def attention_maps(self, f_a, C_a, f_b, C_b):
        """Return (dot-product weights heads x L_a x L_b, relational weights L_a x L_b)."""
        _, probs, rel, _ = self._branches(f_a, C_a, f_b, C_b)
        return probs, rel

    def _branches(self, f_a, C_a, f_b, C_b):
        cfg = self.cfg
        f_a, f_b = nx.as_tensor(f_a), nx.as_tensor(f_b)
        L_a, L_b = f_a.shape[0], f_b.shape[0]
        if np.shape(C_a)[0] != L_a or np.shape(C_b)[0] != L_b:
            raise nx.DimensionError("coordinate rows must match feature rows")
        h, dh = cfg.heads, cfg.d // cfg.heads
        q = nx.transpose(nx.reshape(self.q(f_a), (L_a, h, dh)), (1, 0, 2))
        k = nx.transpose(nx.reshape(self.k(f_b), (L_b, h, dh)), (1, 2, 0))
        v_flat = self.v(f_b)
        v = nx.transpose(nx.reshape(v_flat, (L_b, h, dh)), (1, 0, 2))
        logits = nx.scale(nx.matmul(q, k), 1.0 / math.sqrt(dh))
        probs = nx.softmax(logits, axis=-1)
        mha = nx.reshape(nx.transpose(nx.matmul(probs, v), (1, 0, 2)), (L_a, cfg.d))
        mha = self.o(mha)

        ca = np.asarray(C_a.data if isinstance(C_a, nx.Tensor) else C_a, dtype=np.float64)
        cb = np.asarray(C_b.data if isinstance(C_b, nx.Tensor) else C_b, dtype=np.float64)
        diff = ca[:, None, :] - cb[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        buckets = quantize_distance(dist, cfg)
        w = relation_weights(f_a, self.eta)
        W = gather_relation(w, buckets)
        rel = nx.softmax_rows(W)
        rel_out = nx.matmul(rel, v_flat)
        return mha, probs, rel, rel_out

    def __call__(self, f_a, C_a, f_b, C_b) -> nx.Tensor:
        f_a = nx.as_tensor(f_a)
        mha, _, _, rel_out = self._branches(f_a, C_a, f_b, C_b)
        x = self.norm(nx.add(nx.add(f_a, mha), rel_out))
        ff = self.ff2(nx.relu(self.ff1(x)))
        return self.norm2(nx.add(x, ff))


def sraa_attention(f_a, C_a, f_b, C_b, layer: SraaLayer) -> nx.Tensor:
    """Functional alias; ``(f_a, C_a) is (f_b, C_b)`` gives self-attention."""
    return layer(f_a, C_a, f_b, C_b)
