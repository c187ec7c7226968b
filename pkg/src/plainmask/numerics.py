# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

"""Dense tensors with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a contiguous row-major numpy array. Operations on
tensors that require gradients are recorded on the active ``Tape`` (if
any); ``Tape.backward`` then replays the recorded operations in exact
reverse order. Outside of a tape, operations run without recording,
which is how evaluation and finite differences are performed.

Broadcasting is restricted to leading dimensions: the shape of one
operand must be a suffix of the shape of the other.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from functools import lru_cache
from typing import (
    TYPE_CHECKING,
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

if TYPE_CHECKING:
    from .layers import BNState

Shape = Tuple[int, ...]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_default_dtype: ContextVar[Any] = ContextVar("plainmask_dtype", default=np.float32)
_active_tape: ContextVar[Optional["Tape"]] = ContextVar("plainmask_tape", default=None)


class DimensionError(Exception):
    """Error thrown when operand shapes are incompatible."""

    pass


class NonFiniteError(Exception):
    """Error thrown when a NaN or an infinity shows up in a gradient."""

    op: str

    def __init__(self, op: str, msg: str):
        super().__init__(msg)
        self.op = op


@contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Sets the dtype of newly created tensors within a block.

    :param dtype: Either ``np.float32`` (the default) or ``np.float64``.
    """
    token = _default_dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _default_dtype.reset(token)


def default_dtype() -> Any:
    return _default_dtype.get()


class Tensor:
    """A dense array that may take part in gradient computation."""

    __array_priority__ = 1000

    data: np.ndarray
    requires_grad: bool
    grad: Optional[np.ndarray]

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        arr = np.asarray(data)
        if dtype is None:
            if arr.dtype in (np.float32, np.float64):
                dtype = arr.dtype
            else:
                dtype = _default_dtype.get()
        self.data = np.require(arr, dtype=dtype, requirements="C")
        self.requires_grad = requires_grad
        self.grad = None

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
            f"requires_grad={self.requires_grad})"
        )

    @property
    def shape(self) -> Shape:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> Any:
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return take(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)


@dataclass
class TapeOp:
    """One executed primitive, with what its backward rule needs."""

    name: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Backward


@dataclass
class Tape:
    """An ordered record of the primitives executed within a block.

    Use as a context manager; every differentiable primitive executed
    inside the block on inputs that require gradients is appended to
    ``ops``.
    """

    ops: List[TapeOp] = field(default_factory=list)
    _tokens: List[Any] = field(default_factory=list, repr=False)

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc: Any) -> None:
        _active_tape.reset(self._tokens.pop())

    def record(self, op: TapeOp) -> None:
        self.ops.append(op)

    def backward(
        self,
        loss: Tensor,
        grad: Optional[np.ndarray] = None,
        check_finite: bool = False,
    ) -> None:
        """Propagates gradients from ``loss`` to every recorded input.

        Gradients accumulate into the ``grad`` field of every tensor
        that requires gradients; tensors that do not require gradients
        are never written to.

        :param loss: The tensor to differentiate, usually a scalar.
        :param grad: Seed gradient; defaults to ones.
        :param check_finite: If true, a non-finite gradient aborts the
            traversal with a NonFiniteError naming the faulty op.
        """
        if not loss.requires_grad:
            raise ValueError("Cannot differentiate a tensor that does not require gradients")
        loss.grad = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        for op in reversed(self.ops):
            g = op.output.grad
            if g is None:
                continue
            for inp, ig in zip(op.inputs, op.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if check_finite and not np.all(np.isfinite(ig)):
                    raise NonFiniteError(op.name, f"Non-finite gradient produced by {op.name}")
                ig = ig.astype(inp.data.dtype, copy=False)
                inp.grad = ig if inp.grad is None else inp.grad + ig

    def first_nonfinite(self) -> Optional[str]:
        """Gets the name of the first op whose output is not finite."""
        for op in self.ops:
            if not np.all(np.isfinite(op.output.data)):
                return op.name
        return None


def _result(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    tape = _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        assert tape is not None
        tape.record(TapeOp(name, out, tuple(inputs), backward))
    return out


def _lift(x: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _operands(a: Any, b: Any) -> Tuple[Tensor, Tensor]:
    """Lifts a non-tensor operand to the dtype of the tensor one."""
    return (
        _lift(a, b if isinstance(b, Tensor) else None),
        _lift(b, a if isinstance(a, Tensor) else None),
    )


def _broadcast_shape(a: Shape, b: Shape, op: str) -> Shape:
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if tuple(big[len(big) - len(small) :]) != tuple(small):
        raise DimensionError(
            f"{op}: cannot broadcast shapes {a} and {b} (only leading dimensions broadcast)"
        )
    return big


def _unbroadcast(g: np.ndarray, shape: Shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# Elementwise arithmetic


def add(a: Any, b: Any) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a.shape, b.shape, "add")

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a: Any, b: Any) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a: Any, b: Any) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _result("mul", a.data * b.data, (a, b), backward)


def div(a: Any, b: Any) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a.shape, b.shape, "div")
    out = a.data / b.data

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _result("div", out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _result("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# Linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    except DimensionError:
        raise DimensionError(
            f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast"
        )

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _result("matmul", np.matmul(a.data, b.data), (a, b), backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.require(np.transpose(x.data, axes), requirements="C")
    return _result("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} into {tuple(shape)}")
    return _result("reshape", out, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenates tensors along an existing axis."""
    if len(tensors) == 0:
        raise DimensionError("concat: nothing to concatenate")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", out, tuple(tensors), backward)


def take(x: Tensor, index: Any) -> Tensor:
    """Indexing (slices or integer arrays) with a scatter-add backward."""
    out = np.array(x.data[index], copy=True)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        z = np.zeros_like(x.data)
        np.add.at(z, index, g)
        return (z,)

    return _result("take", out, (x,), backward)


def tensor_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result("sum", np.asarray(out), (x,), backward)


def tensor_mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis, keepdims), 1.0 / count)


# Nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v**3))
    out = 0.5 * v * (1.0 + t)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _result("gelu", out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax computed with max-subtraction.

    Entries equal to ``-inf`` get a weight of exactly zero, as long as
    each row holds at least one finite entry.
    """
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), backward)


# Normalisation


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalises every row of ``x`` over its last axis."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match {x.shape}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - np.mean(dxhat, axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return (dx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead))

    return _result("layer_norm", out, (x, gamma, beta), backward)


def batch_norm(x: Tensor, state: "BNState", training: bool) -> Tensor:
    """Batch normalisation of ``x[N, C]`` over its first axis.

    In training mode the batch statistics are used and the running
    statistics of ``state`` are updated with its momentum (the running
    variance uses the unbiased batch variance). In evaluation mode the
    running statistics are used.
    """
    if x.ndim != 2 or x.shape[1] != state.gamma.shape[0]:
        raise DimensionError(
            f"batch_norm: input {x.shape} does not match {state.gamma.shape[0]} channels"
        )
    gamma, beta = state.gamma, state.beta
    if training:
        n = x.shape[0]
        mu = np.mean(x.data, axis=0)
        var = np.var(x.data, axis=0)
        m = state.momentum
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_mean.data = ((1 - m) * state.running_mean.data + m * mu).astype(
            state.running_mean.dtype
        )
        state.running_var.data = ((1 - m) * state.running_var.data + m * unbiased).astype(
            state.running_var.dtype
        )
    else:
        mu = state.running_mean.data
        var = state.running_var.data
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        dxhat = g * gamma.data
        if training:
            dx = inv_std * (
                dxhat
                - np.mean(dxhat, axis=0)
                - xhat * np.mean(dxhat * xhat, axis=0)
            )
        else:
            dx = dxhat * inv_std
        return (dx, np.sum(g * xhat, axis=0), np.sum(g, axis=0))

    return _result("batch_norm", out, (x, gamma, beta), backward)


# Spatial operations


@lru_cache(maxsize=64)
def _upsample_matrix(n: int, dtype_name: str) -> np.ndarray:
    """Interpolation matrix (2n x n), half-pixel centres, edge clamped."""
    m = np.zeros((2 * n, n), dtype=np.dtype(dtype_name))
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        w1 = src - i0
        m[i, i0] += 1.0 - w1
        m[i, i1] += w1
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of ``x[C, h, w]`` (align-corners false)."""
    if x.ndim != 3:
        raise DimensionError(f"bilinear_upsample2x: expected [C, h, w], got {x.shape}")
    _, h, w = x.shape
    uh = _upsample_matrix(h, x.dtype.name)
    uw = _upsample_matrix(w, x.dtype.name)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _result("bilinear_upsample2x", out, (x,), backward)


def upsample_array(x: np.ndarray, times: int = 1) -> np.ndarray:
    """Applies ``times`` bilinear 2x upsamplings to a plain [C, h, w] array."""
    for _ in range(times):
        uh = _upsample_matrix(x.shape[-2], x.dtype.name)
        uw = _upsample_matrix(x.shape[-1], x.dtype.name)
        x = np.matmul(np.matmul(uh, x), uw.T)
    return x


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotates consecutive feature pairs of ``x[..., T, d]``.

    Pair ``(x[2i], x[2i+1])`` of token ``t`` is rotated by the angle
    whose cosine and sine are ``cos[t, i]`` and ``sin[t, i]``.
    """
    if x.shape[-1] % 2 != 0:
        raise DimensionError(f"rotate_pairs: odd feature dimension in {x.shape}")
    if cos.shape != (x.shape[-2], x.shape[-1] // 2) or sin.shape != cos.shape:
        raise DimensionError(
            f"rotate_pairs: factors {cos.shape} do not match input {x.shape}"
        )
    c = cos.astype(x.dtype, copy=False)
    s = sin.astype(x.dtype, copy=False)
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * c + go * s
        gx[..., 1::2] = -ge * s + go * c
        return (gx,)

    return _result("rotate_pairs", out, (x,), backward)


# Losses


def bce_with_logits(x: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy between ``sigmoid(x)`` and ``target``."""
    if target.shape != x.shape:
        raise DimensionError(f"bce_with_logits: target {target.shape} vs logits {x.shape}")
    v = x.data
    t = target.astype(x.dtype, copy=False)
    out = np.maximum(v, 0) - v * t + np.log1p(np.exp(-np.abs(v)))

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * (0.5 * (1.0 + np.tanh(0.5 * v)) - t),)

    return _result("bce_with_logits", out, (x,), backward)


def cross_entropy(
    logits: Tensor, target: np.ndarray, class_weights: Optional[np.ndarray] = None
) -> Tensor:
    """Weighted mean cross-entropy of ``logits[K, C]`` against integer labels.

    The loss is ``sum_i w[t_i] * nll_i / sum_i w[t_i]``.
    """
    if logits.ndim != 2 or target.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    k, c = logits.shape
    weights = np.ones(c) if class_weights is None else np.asarray(class_weights)
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lsm = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    rows = np.arange(k)
    w = weights[target].astype(logits.dtype)
    total_w = float(np.sum(w))
    out = np.asarray(-np.sum(w * lsm[rows, target]) / total_w, dtype=logits.dtype)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        d = np.exp(lsm)
        d[rows, target] -= 1.0
        return (g * d * (w / total_w)[:, None],)

    return _result("cross_entropy", out, (logits,), backward)


# Verification


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    name: str
    max_rel_error: float
    checked: int
    worst_parameter: Optional[str] = None
    failed_op: Optional[str] = None
    """Provenance of a non-finite value, if any."""

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.failed_op is None and self.max_rel_error < tolerance


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    name: str = "f",
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    abs_tolerance: float = 1e-10,
) -> GradCheckReport:
    """Compares analytic gradients to central finite differences.

    The relative error of each checked entry is
    ``|a - n| / max(1e-8, |a| + |n|)``; entries whose absolute
    difference is below ``abs_tolerance`` count as exact (this is the
    noise floor of central differences in 64-bit arithmetic).

    :param f: Computes the scalar to differentiate. It is called once
        under a tape, then repeatedly without one.
    :param params: The tensors to check; they must be 64-bit.
    :param name: Label of the check, used in the report.
    :param h: Finite-difference step.
    :param max_entries: If set, check at most this many randomly chosen
        entries per parameter.
    :param seed: Seed of the entry sampling.
    :param abs_tolerance: See above.

    :returns: The report; a non-finite value anywhere is reported as a
        failure carrying the name of the op that produced it.
    """
    named: Dict[str, Tensor] = (
        dict(params) if isinstance(params, Mapping) else {str(i): p for i, p in enumerate(params)}
    )
    for pname, p in named.items():
        if p.dtype != np.float64:
            raise ValueError(f"grad_check: parameter {pname} is {p.dtype}, not float64")
        p.zero_grad()

    with Tape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        return GradCheckReport(name, math.inf, 0, failed_op=tape.first_nonfinite() or "forward")
    if loss.requires_grad:
        try:
            tape.backward(loss, check_finite=True)
        except NonFiniteError as e:
            return GradCheckReport(name, math.inf, 0, failed_op=e.op)

    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, None, 0
    for pname, p in named.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(f().data)
            flat[idx] = orig - h
            fm = float(f().data)
            flat[idx] = orig
            numeric = (fp - fm) / (2 * h)
            if not math.isfinite(numeric):
                return GradCheckReport(
                    name, math.inf, checked, pname, "finite-difference evaluation"
                )
            a = float(analytic.reshape(-1)[idx])
            checked += 1
            if abs(a - numeric) <= abs_tolerance:
                continue
            err = relative_error(a, numeric)
            if err > worst:
                worst, worst_name = err, pname
    for p in named.values():
        p.zero_grad()
    logging.debug(f"grad_check {name}: max relative error {worst:.3g} over {checked} entries")
    return GradCheckReport(name, worst, checked, worst_name)
