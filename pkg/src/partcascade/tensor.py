"""Dense float32 tensors with reverse-mode automatic differentiation.

Everything downstream (denoisers, training, sampling) is expressed with the
operations in this module. Design constraints:

- single CPU kernel set backed by numpy, no fusion, no broadcasting beyond
  what the attention blocks need;
- values are float32 by default (``using_dtype`` exists so verification code
  can re-run a graph in float64);
- randomness always flows through an explicit ``RandomSource`` (numpy PCG64)
  so equal seeds give bit-identical runs.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "RandomSource",
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "backward",
    "no_grad",
    "using_dtype",
    "set_debug_checks",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "transpose",
    "reshape",
    "concat",
    "gather_rows",
    "softmax",
    "layernorm",
    "silu",
    "tsum",
    "tmean",
    "mse",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation precondition was violated (e.g. non-scalar loss)."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN/Inf while debug checks are enabled."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG_CHECKS = False


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily change the dtype new tensors are created with.

    Used by gradient-verification code to run graphs in float64; artifacts
    (checkpoints, shape files) always stay float32.
    """
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug_checks(enabled: bool) -> None:
    """Turn on per-op finiteness checks (NaN/Inf raise ``NonFiniteError``)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _check_finite(data: np.ndarray, opname: str) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{opname}'")


class Tensor:
    """A node in the computation graph: numpy payload, the op that produced
    it, parent links, and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)

    def backward(self):
        return backward(self)


def _make(data: np.ndarray, parents, backward_fn, opname: str) -> Tensor:
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = opname
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g  # grad buffer is owned by us (copied on first accum)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), back, "mul")


def scale(a: Tensor, k: float) -> Tensor:
    k = a.data.dtype.type(k)
    data = a.data * k

    def back(g):
        if a.requires_grad:
            _accum(a, g * k)

    return _make(data, (a,), back, "scale")


def shift(a: Tensor, k: float) -> Tensor:
    data = a.data + a.data.dtype.type(k)

    def back(g):
        if a.requires_grad:
            _accum(a, g)

    return _make(data, (a,), back, "shift")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched over leading axes, weights may stay 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} @ {b.shape}"
        )
    data = np.matmul(a.data, b.data)

    def back(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # weight case: fold batch dims into one gemm
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g),
                                  b.shape)
            _accum(b, gb)

    return _make(data, (a, b), back, "matmul")


# -- shape ops ---------------------------------------------------------------


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv))

    return _make(data, (a,), back, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    orig = a.shape

    def back(g):
        if a.requires_grad:
            _accum(a, g.reshape(orig))

    return _make(data, (a,), back, "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, offsets, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accum(t, piece)

    return _make(data, tuple(tensors), back, "concat")


def tslice(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)

    return _make(data, (a,), back, "slice")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of an embedding table by integer id."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError("gather_rows expects a flat id sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("token id outside the embedding table")
    data = table.data[ids]

    def back(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _make(data, (table,), back, "gather_rows")


# -- nonlinear ops -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        if a.requires_grad:
            gy = g * data
            _accum(a, gy - data * gy.sum(axis=axis, keepdims=True))

    return _make(data, (a,), back, "softmax")


def layernorm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean / unit-variance normalization with no learned affine.

    Scale and shift come from the conditioning pathway (see denoiser.adaln),
    never from this op.
    """
    if a.shape[axis] < 2:
        raise DimensionError("layernorm axis extent must be >= 2")
    x = a.data
    mean = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = (x - mean) * inv

    def back(g):
        if a.requires_grad:
            gm = g.mean(axis=axis, keepdims=True)
            gym = (g * y).mean(axis=axis, keepdims=True)
            _accum(a, inv * (g - gm - y * gym))

    return _make(y, (a,), back, "layernorm")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    data = x * sig

    def back(g):
        if a.requires_grad:
            _accum(a, g * (sig * (1.0 + x * (1.0 - sig))))

    return _make(data, (a,), back, "silu")


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=a.data.dtype)

    def back(g):
        if a.requires_grad:
            if axis is None:
                _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                _accum(a, np.broadcast_to(gg, a.shape).astype(a.data.dtype))

    return _make(np.asarray(data), (a,), back, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every coordinate; the training loss."""
    if pred.shape != target.shape:
        raise DimensionError(
            f"mse shapes differ: {pred.shape} vs {target.shape}"
        )
    diff = pred.data - target.data
    n = diff.size
    data = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def back(g):
        coef = 2.0 / n
        if pred.requires_grad:
            _accum(pred, g * coef * diff)
        if target.requires_grad:
            _accum(target, -g * coef * diff)

    return _make(data, (pred, target), back, "mse")


# -- autodiff ----------------------------------------------------------------


def backward(loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Accumulates ``.grad`` on every tensor reachable from ``loss`` that has
    ``requires_grad`` and returns a map from leaf tensors (graph inputs) to
    their gradients. Each node's backward closure runs exactly once.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    return {
        node: node.grad
        for node in topo
        if node._backward is None and node.grad is not None
    }


# -- randomness --------------------------------------------------------------


class RandomSource:
    """Seeded PCG64 stream; the single noise source of the whole artifact.

    ``spawn`` derives independent child streams (numpy SeedSequence), used
    for per-shape dataset generation and for splitting training/sampling
    noise from auxiliary draws.
    """

    def __init__(self, seed: int):
        self._seq = np.random.SeedSequence(seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    @classmethod
    def _from_seq(cls, seq: np.random.SeedSequence) -> "RandomSource":
        out = cls.__new__(cls)
        out._seq = seq
        out.gen = np.random.Generator(np.random.PCG64(seq))
        return out

    def spawn(self, k: int) -> list["RandomSource"]:
        return [RandomSource._from_seq(s) for s in self._seq.spawn(k)]

    def normal(self, shape=()) -> np.ndarray:
        return self.gen.standard_normal(size=shape, dtype=np.float32)

    def normal_tensor(self, shape=(), requires_grad: bool = False) -> Tensor:
        return Tensor(self.normal(shape), requires_grad=requires_grad)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0):
        return self.gen.uniform(low, high, size=shape).astype(np.float32)

    def integers(self, low: int, high: int, shape=()):
        return self.gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)
