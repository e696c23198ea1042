"""
Dense float64 tensors with reverse-mode automatic differentiation.

Ops run eagerly on numpy arrays. While a Tape is active, every op with at least one tracked
input (a parameter, or the result of a tracked op on the same tape) appends a node holding one
vector-Jacobian closure per input. Tape.gradient sweeps those nodes once, in reverse order.
Matrix ops act on the last two axes; leading axes are batch axes.
"""

from __future__ import annotations

import logging
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.config import TensorConfig
from app.errors import ContractError, DimensionError, NonFiniteError
from app.models import ParamGroup

logger = logging.getLogger("Tensor")

VJP = Callable[[np.ndarray], np.ndarray]
Operand = Union["Tensor", np.ndarray, float, int]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class Tensor:
    """Value-semantic array; ops never write into `data`."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")
    # numpy must hand mixed expressions over to the reflected operators below
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: Operand) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return divide(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return divide(other, self)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _not_scalar(tensor: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {tensor.shape}")


@dataclass
class Parameter:
    """Trainable tensor registered in exactly one group (theta_F or theta_C)."""

    name: str
    tensor: Tensor
    group: ParamGroup

    def __post_init__(self):
        self.tensor.requires_grad = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Optional[int], ...]
    vjps: Tuple[VJP, ...]


class Tape:
    """
    Ordered record of the ops of one forward pass.

    Usage:
        >>> with Tape() as tape:
        >>>     loss = (x @ w).sum()
        >>> (grad_w,) = tape.gradient(loss, [w])
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._leaf_ids: Dict[int, int] = {}
        # leaves are kept alive so their id() stays unique for the tape's lifetime
        self._leaves: List[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def _append(self, op: str, inputs: Tuple[Optional[int], ...], vjps: Tuple[VJP, ...]) -> int:
        self.nodes.append(TapeNode(op, inputs, vjps))
        return len(self.nodes) - 1

    def node_of(self, tensor: Tensor) -> Optional[int]:
        """Node id of `tensor` on this tape, registering parameters as leaves on first use."""
        if tensor.tape is self:
            return tensor.node_id
        if not tensor.requires_grad:
            return None
        key = id(tensor)
        if key not in self._leaf_ids:
            self._leaf_ids[key] = self._append("leaf", (), ())
            self._leaves.append(tensor)
        return self._leaf_ids[key]

    def record(self, op: str, parents: Sequence[Tensor], vjps: Tuple[VJP, ...]) -> Optional[int]:
        inputs = tuple(self.node_of(parent) for parent in parents)
        if all(node_id is None for node_id in inputs):
            return None
        return self._append(op, inputs, vjps)

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> List[np.ndarray]:
        """Gradients of a scalar `loss` for each source; zeros for sources it does not reach."""
        grads = reverse_sweep(self, loss)
        result = []
        for source in sources:
            if source.tape is self:
                node_id = source.node_id
            else:
                node_id = self._leaf_ids.get(id(source))
            grad = grads.get(node_id) if node_id is not None else None
            result.append(grad if grad is not None else np.zeros_like(source.data))
        return result

    def parameter_gradients(self, loss: Tensor, params: Sequence[Parameter]) -> Dict[str, np.ndarray]:
        grads = self.gradient(loss, [param.tensor for param in params])
        return {param.name: grad for param, grad in zip(params, grads)}


def reverse_sweep(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Back-propagate from a scalar node; multiple consumers accumulate by summation."""
    if loss.tape is not tape or loss.node_id is None:
        raise ContractError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"gradient seed must be a scalar, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node_id in range(loss.node_id, -1, -1):
        grad = grads.get(node_id)
        if grad is None:
            continue
        node = tape.nodes[node_id]
        for parent_id, vjp in zip(node.inputs, node.vjps):
            if parent_id is None:
                continue
            contribution = vjp(grad)
            previous = grads.get(parent_id)
            grads[parent_id] = contribution if previous is None else previous + contribution
    return grads


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], vjps: Tuple[VJP, ...]) -> Tensor:
    if TensorConfig.CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        node_id = tape.record(op, parents, vjps)
        if node_id is not None:
            out.node_id = node_id
            out.tape = tape
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, (tuple, list)) else (axis,)
    return tuple(sorted(a % ndim for a in axes))


def _require_matrix(op: str, a: Tensor) -> None:
    if a.ndim < 2:
        raise DimensionError(f"{op}: expected a matrix (or batch of matrices), got shape {a.shape}")


# elementwise and broadcasting ops


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def scale(a: Operand, factor: float) -> Tensor:
    """Multiply by a constant."""
    a = as_tensor(a)
    factor = float(factor)
    return _make(a.data * factor, "scale", (a,), (lambda g: g * factor,))


def hadamard(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("hadamard", a, b)
    return _make(
        a.data * b.data,
        "hadamard",
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def divide(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("divide", a, b)
    out = a.data / b.data
    return _make(
        out,
        "divide",
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def _relu_grad(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return grad * (x > 0)


def relu(a: Operand) -> Tensor:
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0.0), "relu", (a,), (lambda g: _relu_grad(a.data, g),))


def log(a: Operand) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), (lambda g: g / a.data,))


def sqrt(a: Operand) -> Tensor:
    """Elementwise square root; the derivative at 0 is taken as 0 instead of +inf."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    positive = out > 0
    safe_out = np.where(positive, out, 1.0)
    return _make(out, "sqrt", (a,), (lambda g: np.where(positive, 0.5 * g / safe_out, 0.0),))


def xlogx(a: Operand) -> Tensor:
    """Elementwise x*log(x) with 0*log(0) := 0."""
    a = as_tensor(a)
    positive = a.data > 0
    safe_log = np.log(np.where(positive, a.data, 1.0))
    out = np.where(positive, a.data * safe_log, 0.0)
    return _make(out, "xlogx", (a,), (lambda g: g * np.where(positive, safe_log + 1.0, 0.0),))


def gradient_reversal(a: Operand, factor: float = -1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by `factor`."""
    a = as_tensor(a)
    factor = float(factor)
    return _make(a.data, "grl", (a,), (lambda g: g * factor,))


# shape ops and reductions


def reshape(a: Operand, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    return _make(out, "reshape", (a,), (lambda g: g.reshape(a.shape),))


def transpose(a: Operand) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    _require_matrix("transpose", a)
    return _make(np.swapaxes(a.data, -1, -2), "transpose", (a,), (lambda g: np.swapaxes(g, -1, -2),))


def _spread(grad: np.ndarray, axes: Tuple[int, ...], keepdims: bool, shape: Tuple[int, ...]) -> np.ndarray:
    if not keepdims:
        grad = np.expand_dims(grad, axes)
    return np.broadcast_to(grad, shape).copy()


def sum_(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, "sum", (a,), (lambda g: _spread(g, axes, keepdims, a.shape),))


def mean(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.sum(axis=axes, keepdims=keepdims) / count
    return _make(out, "mean", (a,), (lambda g: _spread(g / count, axes, keepdims, a.shape),))


def trace(a: Operand) -> Tensor:
    a = as_tensor(a)
    _require_matrix("trace", a)
    if a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"trace: matrix is not square, shape {a.shape}")
    eye = np.eye(a.shape[-1])
    out = np.trace(a.data, axis1=-2, axis2=-1)
    return _make(out, "trace", (a,), (lambda g: np.asarray(g)[..., None, None] * eye,))


def frobenius_norm(a: Operand) -> Tensor:
    a = as_tensor(a)
    _require_matrix("frobenius_norm", a)
    out = np.sqrt((a.data * a.data).sum(axis=(-2, -1)))
    return _make(
        out,
        "frobenius_norm",
        (a,),
        (lambda g: np.asarray(g)[..., None, None] * a.data / out[..., None, None],),
    )


# linear algebra


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_matrix("matmul", a)
    _require_matrix("matmul", b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch axes do not broadcast, {a.shape} @ {b.shape}")
    return _make(
        out,
        "matmul",
        (a, b),
        (
            lambda g: _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
            lambda g: _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
        ),
    )


def conv2d(x: Operand, kernel: Operand, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlation of x (c_in, H, W) or (b, c_in, H, W) with kernel (c_out, c_in, kh, kw).

    :return: (c_out, H', W') or (b, c_out, H', W') with H' = (H + 2*padding - kh) // stride + 1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: unsupported shapes input {x.shape}, kernel {kernel.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    _, channels, height, width = xd.shape
    c_out, c_in, kh, kw = kernel.shape
    if c_in != channels:
        raise DimensionError(f"conv2d: input {x.shape} has {channels} channels, kernel {kernel.shape} expects {c_in}")
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (padding {padding})")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(xd, pad) if padding else xd
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def grad_input(g: np.ndarray) -> np.ndarray:
        gb = g if batched else g[None]
        d_windows = np.tensordot(gb, kernel.data, axes=([1], [0]))
        d_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                d_xp[
                    :, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride
                ] += d_windows[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        d_x = d_xp[:, :, padding : padding + height, padding : padding + width]
        return d_x if batched else d_x[0]

    def grad_kernel(g: np.ndarray) -> np.ndarray:
        gb = g if batched else g[None]
        return np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))

    return _make(out if batched else out[0], "conv2d", (x, kernel), (grad_input, grad_kernel))


def softmax_rows(logits: Operand) -> Tensor:
    """Softmax over the last axis, computed after max-subtraction."""
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("softmax_rows: non-finite logits")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)
    return _make(
        probs,
        "softmax_rows",
        (logits,),
        (lambda g: probs * (g - (g * probs).sum(axis=-1, keepdims=True)),),
    )


def log_softmax_rows(logits: Operand) -> Tensor:
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("log_softmax_rows: non-finite logits")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _make(
        out,
        "log_softmax_rows",
        (logits,),
        (lambda g: g - probs * g.sum(axis=-1, keepdims=True),),
    )


def triu_vec(a: Operand) -> Tensor:
    """
    Row-major upper triangle (diagonal included) of the last two axes.
    Backward splits an off-diagonal slot's gradient evenly between (i, j) and (j, i).
    """
    a = as_tensor(a)
    _require_matrix("triu_vec", a)
    dim = a.shape[-1]
    if a.shape[-2] != dim:
        raise DimensionError(f"triu_vec: matrix is not square, shape {a.shape}")
    rows, cols = np.triu_indices(dim)
    diagonal = rows == cols
    own = np.where(diagonal, 1.0, 0.5)
    mirrored = np.where(diagonal, 0.0, 0.5)

    def grad(g: np.ndarray) -> np.ndarray:
        full = np.zeros(a.shape)
        full[..., rows, cols] = g * own
        full[..., cols, rows] += g * mirrored
        return full

    return _make(a.data[..., rows, cols], "triu_vec", (a,), (grad,))
