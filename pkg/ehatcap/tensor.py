#!/usr/bin/env python3
"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a `Function` subclass with a numpy `forward`
and a `backward` that maps the output gradient to one gradient per input.
`Function.apply` builds the graph; `backward(loss)` walks it in reverse
topological order and accumulates `.grad` on requires_grad leaves.

Broadcasting is limited to scalars and rows (a length-n vector against an
m x n matrix). Anything else raises DimensionError.
"""
from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ehatcap.errors import ConfigurationError, ContractError, DimensionError, NumericalError

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]
Operand = Union["Tensor", float, int]

_UINT64 = 0xFFFFFFFFFFFFFFFF
_SIGMOID_HI = float(np.nextafter(1.0, 0.0))
_SIGMOID_LO = float(np.finfo(np.float64).tiny)

_grad_enabled = True
_kink_log: Optional[List[bytes]] = None


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording the graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def record_relu_patterns() -> Iterator[List[bytes]]:
    """Collect the active/inactive pattern of every relu evaluated inside the block."""
    global _kink_log
    previous = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = previous


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *tensors: "Tensor") -> None:
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
    ) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            op = type(creator).__name__ if creator is not None else "leaf"
            raise NumericalError(f"non-finite value produced by {op} (shape {arr.shape})")
        self.data = arr
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return add(neg(self), other)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by a python scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


def tensor(values: ArrayLike, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor holding a private copy of `values`."""
    return Tensor(np.array(values, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(float(value))


# ===== Broadcasting helpers =====


def _broadcast_kind(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]) -> str:
    if a_shape == b_shape:
        return "same"
    if b_shape == () or b_shape == (1,):
        return "scalar"
    if len(a_shape) == 2 and b_shape in ((a_shape[1],), (1, a_shape[1])):
        return "row"
    raise DimensionError(f"shapes {a_shape} and {b_shape} are not broadcast-compatible")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    if shape == (1,):
        return np.asarray([grad.sum()])
    if len(shape) == 1:
        return grad.sum(axis=0)
    return grad.sum(axis=0, keepdims=True)


def _check_elementwise(a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """Order operands so that the second one is the broadcast side."""
    try:
        _broadcast_kind(a.shape, b.shape)
        return a, b
    except DimensionError:
        _broadcast_kind(b.shape, a.shape)
        return b, a


# ===== Elementwise operations =====


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = self.tensors
        return _reduce_to(grad, a.shape), _reduce_to(grad, b.shape)


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = self.tensors
        return _reduce_to(grad, a.shape), -_reduce_to(grad, b.shape)


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = self.tensors
        return _reduce_to(grad * b.data, a.shape), _reduce_to(grad * a.data, b.shape)


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (-grad,)


class Scale(Function):
    def forward(self, a: np.ndarray, factor: float = 1.0) -> np.ndarray:
        self.factor = factor
        return a * factor

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.factor,)


class Relu(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        if _kink_log is not None:
            _kink_log.append(np.packbits(a > 0.0).tobytes())
        return np.maximum(a, 0.0)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        return (grad * (a.data > 0.0),)


class Sigmoid(Function):
    """Logistic function, evaluated without overflow and kept strictly inside (0, 1)."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        e = np.exp(-np.abs(a))
        out = np.where(a >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
        self.out = np.clip(out, _SIGMOID_LO, _SIGMOID_HI)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.out * (1.0 - self.out),)


class MaskMul(Function):
    """Multiply by a constant array (dropout masks)."""

    def forward(self, a: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        assert mask is not None
        self.mask = mask
        return a * mask

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.mask,)


def add(a: Operand, b: Operand) -> Tensor:
    x, y = _check_elementwise(_as_tensor(a), _as_tensor(b))
    return Add.apply(x, y)


def sub(a: Operand, b: Operand) -> Tensor:
    x, y = _as_tensor(a), _as_tensor(b)
    try:
        _broadcast_kind(x.shape, y.shape)
    except DimensionError:
        return add(neg(y), x)
    return Sub.apply(x, y)


def mul(a: Operand, b: Operand) -> Tensor:
    x, y = _check_elementwise(_as_tensor(a), _as_tensor(b))
    return Mul.apply(x, y)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def relu(a: Tensor) -> Tensor:
    return Relu.apply(a)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def elementwise(op: str, a: Tensor, b: Optional[Operand] = None) -> Tensor:
    """
    Dispatch an elementwise operation by name.

    Args:
        op: one of add, mul, scale, relu, sigmoid
        a: first operand
        b: second operand (tensor or scalar) for add/mul, the factor for scale
    """
    if op == "add":
        return add(a, _require_operand(op, b))
    if op == "mul":
        return mul(a, _require_operand(op, b))
    if op == "scale":
        factor = _require_operand(op, b)
        if isinstance(factor, Tensor):
            return mul(a, factor)
        return scale(a, float(factor))
    if op == "relu":
        return relu(a)
    if op == "sigmoid":
        return sigmoid(a)
    raise ContractError(f"unknown elementwise op '{op}'")


def _require_operand(op: str, b: Optional[Operand]) -> Operand:
    if b is None:
        raise ContractError(f"elementwise '{op}' needs a second operand")
    return b


# ===== Matrix operations =====


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a @ b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = self.tensors
        return grad @ b.data.T, a.data.T @ grad


class Transpose(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return a.T

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad.T,)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul of {a.shape} and {b.shape}: inner dimensions must match")
    return MatMul.apply(a, b)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return Transpose.apply(a)


class SoftmaxRows(Function):
    def forward(self, a: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
        z = a if bias is None else a + bias
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


class LogSoftmaxRows(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        z = a - a.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        self.probs = np.exp(out)
        return out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad - self.probs * grad.sum(axis=-1, keepdims=True),)


def softmax_rows(a: Tensor, bias: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax with max-subtraction; `bias` is a constant added first."""
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {a.shape}")
    if bias is not None and bias.shape != a.shape:
        raise DimensionError(f"softmax bias {bias.shape} does not match scores {a.shape}")
    return SoftmaxRows.apply(a, bias=bias)


def log_softmax_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"log_softmax_rows needs a matrix, got shape {a.shape}")
    return LogSoftmaxRows.apply(a)


# ===== Structural operations =====


class ConcatCols(Function):
    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        self.widths = [arr.shape[1] for arr in arrays]
        return np.concatenate(arrays, axis=1)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        cuts = np.cumsum(self.widths)[:-1]
        return tuple(np.split(grad, cuts, axis=1))


class ConcatRows(Function):
    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        self.heights = [arr.shape[0] for arr in arrays]
        return np.concatenate(arrays, axis=0)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        cuts = np.cumsum(self.heights)[:-1]
        return tuple(np.split(grad, cuts, axis=0))


class SliceCols(Function):
    def forward(self, a: np.ndarray, start: int = 0, stop: int = 0) -> np.ndarray:
        self.start, self.stop = start, stop
        return a[:, start:stop]

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        full = np.zeros(a.shape)
        full[:, self.start : self.stop] = grad
        return (full,)


class SliceRows(Function):
    def forward(self, a: np.ndarray, start: int = 0, stop: int = 0) -> np.ndarray:
        self.start, self.stop = start, stop
        return a[start:stop]

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        full = np.zeros(a.shape)
        full[self.start : self.stop] = grad
        return (full,)


def concat_cols(*tensors: Tensor) -> Tensor:
    """Column-wise concatenation [A, B, ...] of matrices with equal row counts."""
    rows = {t.shape[0] if t.ndim == 2 else -1 for t in tensors}
    if len(rows) != 1 or -1 in rows:
        raise DimensionError(
            "concat_cols needs matrices with equal row counts, got "
            + ", ".join(str(t.shape) for t in tensors)
        )
    return ConcatCols.apply(*tensors)


def concat_rows(*tensors: Tensor) -> Tensor:
    cols = {t.shape[1] if t.ndim == 2 else -1 for t in tensors}
    if len(cols) != 1 or -1 in cols:
        raise DimensionError(
            "concat_rows needs matrices with equal column counts, got "
            + ", ".join(str(t.shape) for t in tensors)
        )
    return ConcatRows.apply(*tensors)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"cannot take columns {start}:{stop} of shape {a.shape}")
    return SliceCols.apply(a, start=start, stop=stop)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[0]:
        raise DimensionError(f"cannot take rows {start}:{stop} of shape {a.shape}")
    return SliceRows.apply(a, start=start, stop=stop)


def split_cols(a: Tensor, width: int) -> Tuple[Tensor, Tensor]:
    """Inverse of concat_cols for two blocks: first `width` columns, then the rest."""
    return slice_cols(a, 0, width), slice_cols(a, width, a.shape[1])


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        return a.reshape(shape)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        return (grad.reshape(a.shape),)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    return Reshape.apply(a, shape=tuple(shape))


class SumAll(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.asarray(a.sum())

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        return (np.full(a.shape, float(grad)),)


def sum_all(a: Tensor) -> Tensor:
    return SumAll.apply(a)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / max(1, a.size))


class ScaleRows(Function):
    """Scale row i of a matrix by w[i]."""

    def forward(self, a: np.ndarray, w: np.ndarray) -> np.ndarray:
        return a * w.reshape(-1, 1)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, w = self.tensors
        ga = grad * w.data.reshape(-1, 1)
        gw = (grad * a.data).sum(axis=1).reshape(w.shape)
        return ga, gw


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    if a.ndim != 2 or w.size != a.shape[0] or w.ndim > 2:
        raise DimensionError(f"scale_rows of {a.shape} by weights {w.shape}")
    return ScaleRows.apply(a, w)


class TileRows(Function):
    def forward(self, a: np.ndarray, reps: int = 1) -> np.ndarray:
        self.reps = reps
        return np.tile(a, (reps, 1))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        return (grad.reshape(self.reps, *a.shape).sum(axis=0),)


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack `reps` copies of a matrix vertically."""
    if a.ndim != 2 or reps < 1:
        raise DimensionError(f"tile_rows of {a.shape} x{reps}")
    if reps == 1:
        return a
    return TileRows.apply(a, reps=reps)


class BlockRowSum(Function):
    def forward(self, a: np.ndarray, block: int = 1) -> np.ndarray:
        self.block = block
        return a.reshape(-1, block, a.shape[1]).sum(axis=1)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.repeat(grad, self.block, axis=0),)


def block_row_sum(a: Tensor, block: int) -> Tensor:
    """Sum consecutive groups of `block` rows: (k*block x n) -> (k x n)."""
    if a.ndim != 2 or block < 1 or a.shape[0] % block:
        raise DimensionError(f"block_row_sum of {a.shape} in blocks of {block}")
    return BlockRowSum.apply(a, block=block)


class PrefixGram(Function):
    """
    Stacked prefix Gram matrices: block t is factor * sum_{i<=t} x_i^T x_i.

    Input (M x d), output (M*d x d).
    """

    def forward(self, x: np.ndarray, factor: float = 1.0) -> np.ndarray:
        self.factor = factor
        m, d = x.shape
        outer = np.einsum("ti,tj->tij", x, x)
        return (np.cumsum(outer, axis=0) * factor).reshape(m * d, d)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (x,) = self.tensors
        m, d = x.shape
        g = grad.reshape(m, d, d)
        tail = np.cumsum(g[::-1], axis=0)[::-1]
        gx = np.einsum("tij,tj->ti", tail, x.data) + np.einsum("tji,tj->ti", tail, x.data)
        return (gx * self.factor,)


def prefix_gram(x: Tensor, factor: float = 1.0) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"prefix_gram needs a matrix, got shape {x.shape}")
    return PrefixGram.apply(x, factor=float(factor))


class Gather(Function):
    """Pick a[i, index[i]] for every row i."""

    def forward(self, a: np.ndarray, index: Optional[np.ndarray] = None) -> np.ndarray:
        assert index is not None
        self.index = index
        return a[np.arange(a.shape[0]), index]

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (a,) = self.tensors
        full = np.zeros(a.shape)
        full[np.arange(a.shape[0]), self.index] = grad
        return (full,)


def gather(a: Tensor, index: Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"gather of {a.shape} with index shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise DimensionError(f"gather index out of range for {a.shape[1]} columns")
    return Gather.apply(a, index=idx)


class Embedding(Function):
    def forward(self, table: np.ndarray, ids: Optional[np.ndarray] = None) -> np.ndarray:
        assert ids is not None
        self.ids = ids
        return table[ids]

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        (table,) = self.tensors
        full = np.zeros(table.shape)
        np.add.at(full, self.ids, grad)
        return (full,)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    return Embedding.apply(table, ids=idx)


class LayerNorm(Function):
    def forward(
        self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
    ) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        return self.xhat * gamma + beta

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        _, gamma, _ = self.tensors
        dxhat = grad * gamma.data
        dx = self.inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (grad * self.xhat).sum(axis=0), grad.sum(axis=0)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm of {x.shape} with gain {gamma.shape}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


# ===== Dropout and randomness =====


def _label_key(label: Union[str, int]) -> int:
    if isinstance(label, int):
        return label & _UINT64
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class RngStream:
    """
    Counter-based random stream.

    Each draw builds a Philox generator keyed by (seed, counter) and then
    advances the counter, so identical (seed, counter) pairs give identical
    draws on every platform.
    """

    seed: int
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        entropy = [self.seed & _UINT64, self.counter & _UINT64]
        self.counter += 1
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *labels: Union[str, int]) -> "RngStream":
        """Derive an independent substream named by `labels`."""
        entropy = [self.seed & _UINT64] + [_label_key(label) for label in labels]
        derived = np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]
        return RngStream(seed=int(derived))

    def uniform(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self._generator().random(shape)

    def normal(self, shape: Tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(0.0, scale, shape)

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        return int(self._generator().integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def categorical(self, probs: np.ndarray) -> int:
        """Draw an index with probability proportional to `probs`."""
        cdf = np.cumsum(probs)
        u = self._generator().random() * cdf[-1]
        return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def dropout(a: Tensor, rate: float, mode: str, rng: Optional[RngStream]) -> Tensor:
    """
    Inverted dropout.

    Eval mode returns `a` itself. Train mode keeps each entry with probability
    1 - rate and scales kept entries by 1 / (1 - rate).
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got '{mode}'")
    if mode == "eval" or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("train-mode dropout needs an RngStream")
    keep = (rng.uniform(a.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return MaskMul.apply(a, mask=keep)


# ===== Backpropagation =====


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited: set[int] = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in visited:
            continue
        if expanded:
            visited.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.tensors:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Populate `.grad` on every requires_grad leaf reachable from a scalar loss.

    Gradients accumulate across calls until they are zeroed.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, g in zip(node.creator.tensors, node.creator.backward(grad)):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = g if key not in grads else grads[key] + g


# ===== Parameters =====


class ParameterStore:
    """Named trainable tensors, keyed by dotted parameter path."""

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}

    def add(self, path: str, values: ArrayLike) -> Tensor:
        if path in self._params:
            raise ContractError(f"parameter path '{path}' already exists")
        param = tensor(values, requires_grad=True)
        self._params[path] = param
        return param

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._params[path]
        except KeyError:
            raise ContractError(f"unknown parameter path '{path}'") from None

    def __contains__(self, path: object) -> bool:
        return path in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def paths(self, prefix: str = "") -> List[str]:
        return [p for p in self._params if p.startswith(prefix)]

    def unique_tensors(self, prefix: str = "") -> List[Tensor]:
        seen: Dict[int, Tensor] = {}
        for path, param in self._params.items():
            if path.startswith(prefix):
                seen.setdefault(id(param), param)
        return list(seen.values())

    def count(self, prefix: str = "") -> int:
        """Number of scalar parameters under `prefix` (tied tensors counted once)."""
        return sum(p.size for p in self.unique_tensors(prefix))

    def tie(self, alias: str, target: str) -> None:
        """Make `alias` share the tensor stored at `target`."""
        if alias not in self._params or target not in self._params:
            raise ContractError(f"cannot tie '{alias}' to '{target}'")
        if self._params[alias].shape != self._params[target].shape:
            raise DimensionError(
                f"cannot tie {self._params[alias].shape} to {self._params[target].shape}"
            )
        self._params[alias] = self._params[target]

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {path: param.data.copy() for path, param in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            if missing or extra:
                raise ContractError(f"checkpoint mismatch: missing={missing} unexpected={extra}")
        for path, values in state.items():
            if path not in self._params:
                continue
            param = self._params[path]
            arr = np.asarray(values, dtype=np.float64)
            if arr.shape != param.shape:
                raise DimensionError(f"'{path}': checkpoint {arr.shape} vs model {param.shape}")
            param.data = arr.copy()

    def copy(self) -> "ParameterStore":
        clone = ParameterStore()
        for path, values in self.state_dict().items():
            clone.add(path, values)
        return clone


def glorot(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * limit
