"""Dense tensors with reverse-mode automatic differentiation.

Every learnable operation in the package is expressed with the ops in this
module. A forward pass records a graph of ``Tensor`` nodes; ``backward``
walks it in reverse topological order (the tape) and accumulates gradients
into every tensor that has ``requires_grad`` set.

Arrays are row-major numpy arrays. Verification runs in float64; training may
run in float32 (see :func:`set_default_dtype`).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonDeterministicError(RuntimeError):
    pass


_state = threading.local()


def _flags():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.checked = False
        _state.dtype = np.float64
    return _state


def default_dtype():
    return _flags().dtype


def set_default_dtype(dtype) -> None:
    _flags().dtype = np.dtype(dtype).type


@contextlib.contextmanager
def using_dtype(dtype):
    prev = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    st = _flags()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextlib.contextmanager
def checked():
    """Raise :class:`NonFiniteError` as soon as an op produces NaN or Inf."""
    st = _flags()
    prev = st.checked
    st.checked = True
    try:
        yield
    finally:
        st.checked = prev


class Tensor:
    """An n-d array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; ``backward_fn(g)`` returns one gradient (or None) per parent."""
    st = _flags()
    if st.checked and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if st.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Intermediate gradients are freed as soon as they are consumed.
    """
    if not root.requires_grad:
        return
    if grad is None:
        if root.data.size != 1:
            raise DimensionError("backward() without grad requires a scalar output")
        grad = np.ones_like(root.data)
    order = _topo_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        grads = node._backward(g)
        for p, pg in zip(node._parents, grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# binary elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        ),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_op(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# unary elementwise
# ---------------------------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("ln of non-positive value")
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """``ln(sigmoid(a))`` without overflow or log(0)."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return make_op(out, (a,), lambda g: (g * _sigmoid_np(-x),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * sgn,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def elementwise(op: str, *args, c: float | None = None) -> Tensor:
    """Dispatch by name: sigmoid, exp, ln, relu, tanh, add, mul, scale."""
    table = {"sigmoid": sigmoid, "exp": exp, "ln": log, "log": log, "relu": relu, "tanh": tanh,
             "add": add, "mul": mul, "sub": sub, "div": div}
    if op == "scale":
        return scale(args[0], c if c is not None else args[1])
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def min_(a, axis: int) -> Tensor:
    """Minimum along ``axis``; the gradient flows to the first argmin."""
    a = as_tensor(a)
    idx = np.argmin(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_op(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        elif isinstance(idx, np.ndarray) and idx.ndim == 1 and idx.dtype != bool:
            if idx.size == 0:
                return (full,)
            flat = full.reshape(shape[0], -1)
            gf = g.reshape(idx.shape[0], -1)
            for c in range(flat.shape[1]):
                flat[:, c] = np.bincount(idx, weights=gf[:, c], minlength=shape[0])
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_op(a.data[idx], (a,), bw)


def gather_last(a, idx: np.ndarray) -> Tensor:
    """``out[..., j] = a[..., idx[..., j]]`` along the last axis."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise IndexError("gather index out of range")
    shape = a.shape

    def bw(g):
        n_rows = int(np.prod(shape[:-1]))
        C = shape[-1]
        rows = np.arange(n_rows).reshape(shape[:-1] + (1,)) * C
        flat_idx = (rows + idx).ravel()
        full = np.bincount(flat_idx, weights=g.ravel(), minlength=n_rows * C)
        return (full.reshape(shape).astype(g.dtype, copy=False),)

    return make_op(np.take_along_axis(a.data, idx, axis=-1), (a,), bw)


# ---------------------------------------------------------------------------
# fused layers
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), bw)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError("softmax_rows expects a matrix")
    return softmax(x, axis=1)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional per-channel gain and bias."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    out = make_op(xhat, (a,), bw)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def pairwise_distance(a, b, eps: float = 1e-12) -> Tensor:
    """Euclidean distances between rows of ``a`` (L_a x 2) and ``b`` (L_b x 2).

    The gradient at coincident points is taken as zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    diff = a.data[:, None, :] - b.data[None, :, :]
    d = np.sqrt((diff * diff).sum(-1))
    safe = np.where(d > eps, d, np.inf)

    def bw(g):
        unit = diff / safe[..., None] * g[..., None]
        return (unit.sum(1) if a.requires_grad else None, -unit.sum(0) if b.requires_grad else None)

    return make_op(d, (a, b), bw)


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    small = ax < beta
    out = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)

    def bw(g):
        return (g * np.where(small, x / beta, np.sign(x)),)

    return make_op(out, (a,), bw)


def segment_mean(a, segments: np.ndarray, n_segments: int) -> tuple[Tensor, np.ndarray]:
    """Average rows of ``a`` that share a segment id; returns (means, counts).

    Empty segments produce zero rows; the caller decides what fills them.
    """
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=n_segments).astype(a.dtype)
    sums = np.zeros((n_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(sums, segments, a.data)
    denom = np.maximum(counts, 1.0).reshape((-1,) + (1,) * (a.ndim - 1))

    def bw(g):
        return ((g / denom)[segments],)

    return make_op(sums / denom, (a,), bw), counts


# ---------------------------------------------------------------------------
# parameters and initialization
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    init_spec: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.tensor.shape


def glorot_uniform(shape: Sequence[int], rng: np.random.Generator, fan_in=None, fan_out=None) -> np.ndarray:
    fan_in = fan_in if fan_in is not None else shape[0]
    fan_out = fan_out if fan_out is not None else shape[-1]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def new_param(shape, rng: np.random.Generator | None = None, init: str = "glorot",
              value: float = 0.0, std: float = 0.02, dtype=None) -> Tensor:
    dtype = dtype or default_dtype()
    if init == "glorot":
        data = glorot_uniform(shape, rng)
    elif init == "constant":
        data = np.full(shape, value)
    elif init == "normal":
        data = rng.normal(0.0, std, size=shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Container that discovers parameters stored as attributes.

    Attributes holding a requires-grad :class:`Tensor`, a :class:`Module`, or a
    list of modules are walked in attribute-definition order, which makes
    parameter names and ordering deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterable[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = np.zeros_like(t.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in own.items():
            if state[k].shape != t.shape:
                raise DimensionError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=state[k].dtype, copy=True)
            t.grad = np.zeros_like(t.data)

    def astype(self, dtype) -> Module:
        for t in self.parameters():
            t.data = t.data.astype(dtype)
            t.grad = np.zeros_like(t.data)
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        if zero:
            self.weight = new_param((d_in, d_out), init="constant")
        else:
            self.weight = new_param((d_in, d_out), rng)
        self.bias = new_param((d_out,), init="constant") if bias else None

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else reshape(x, (-1, x.shape[-1]))
        out = matmul(flat, self.weight)
        if self.bias is not None:
            out = add(out, self.bias)
        if x.ndim != 2:
            out = reshape(out, lead + (self.weight.shape[1],))
        return out


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = new_param((d,), init="constant", value=1.0)
        self.bias = new_param((d,), init="constant", value=0.0)

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-3,
               params: Sequence[Tensor] = ()) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``fn(*inputs)`` must return a tensor; non-scalar outputs are reduced with a
    fixed random projection so every output entry is exercised. Gradients are
    checked for every entry of every input and of ``params``. The relative
    error of an entry is ``|analytic - numeric| / max(|analytic|, |numeric|, 1)``.
    """
    targets = list(inputs) + [p for p in params if all(p is not q for q in inputs)]
    for t in targets:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")

    proj_cache: dict[tuple, np.ndarray] = {}

    def scalar_out() -> Tensor:
        out = fn(*inputs)
        if out.data.size == 1:
            return reshape(out, ())
        key = out.shape
        if key not in proj_cache:
            proj_cache[key] = np.random.default_rng(12345).normal(size=key)
        return sum_(mul(out, proj_cache[key]))

    with no_grad():
        v1 = scalar_out().data.copy()
        v2 = scalar_out().data.copy()
    if not np.array_equal(v1, v2):
        raise NonDeterministicError("function returned different values on repeated evaluation")

    saved = [(t, t.requires_grad, t.grad) for t in targets]
    for t in targets:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    try:
        out = scalar_out()
        backward(out)
        analytic = [t.grad.copy() for t in targets]
        worst = 0.0
        with no_grad():
            for t, ga in zip(targets, analytic):
                flat = t.data.reshape(-1)
                gflat = ga.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = float(scalar_out().data)
                    flat[i] = orig - step
                    fm = float(scalar_out().data)
                    flat[i] = orig
                    num = (fp - fm) / (2 * step)
                    err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1.0)
                    worst = max(worst, err)
    finally:
        for t, rg, g in saved:
            t.requires_grad = rg
            t.grad = g
    return worst


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict | None = None) -> None:
    """Write ``arrays`` as an 8-byte little-endian header length, a JSON header, then raw data.

    The header lists ``{name, shape, dtype, byte_offset}`` for each array in
    insertion order; offsets are relative to the start of the payload.
    """
    import json

    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>="),
                        "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": CHECKPOINT_VERSION, "config": config or {}, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(len(hbytes).to_bytes(8, "little"))
        fh.write(hbytes)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    import json

    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ValueError("truncated checkpoint")
    hlen = int.from_bytes(blob[:8], "little")
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = memoryview(blob)[8 + hlen:]
    arrays: dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        dt = np.dtype("<" + e["dtype"]) if e["dtype"][0] in "fiu" else np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        start = e["byte_offset"]
        if start + n > len(payload):
            raise ValueError(f"checkpoint payload too short for {e['name']}")
        arr = np.frombuffer(payload[start:start + n], dtype=dt).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return arrays, header["config"]
