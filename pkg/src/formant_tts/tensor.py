"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` carrying a
:class:`Node` that remembers its inputs and a closure mapping the output
gradient to input gradients.  :func:`backward` linearises the graph reachable
from a scalar loss into a :class:`ComputationTape` and walks it in reverse.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    NumericError,
    VocabularyError,
)

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    # a non-finite element (or overflow) makes the sum non-finite
    if not math.isfinite(data.sum()):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    return _make("mul", da * db, (a, b),
                 lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    da = a.data
    return _make("square", da * da, (a,), lambda g: (2.0 * da * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make("reshape", data, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def tsum(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    if axis is None:
        return _make("sum", np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, src).copy(),))
    axis = axis % a.ndim
    return _make("sum", a.data.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), src).copy(),))


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    da, db = a.data, b.data

    def backward_fn(g):
        return g @ np.swapaxes(db, -1, -2), np.swapaxes(da, -1, -2) @ g

    return _make("matmul", da @ db, (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(
            f"layer_norm expects gain/bias of shape ({D},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    g_data = gain.data
    lead = tuple(range(x.ndim - 1))

    def backward_fn(g):
        dxhat = g * g_data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", xhat * g_data + bias.data, (x, gain, bias), backward_fn)


def conv1d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded 1-D convolution over time.

    ``x`` is ``[T, C_in]``, ``kernel`` is ``[K, C_in, C_out]`` with odd ``K``;
    samples outside ``[0, T)`` are zero.
    """
    K, c_in, c_out = kernel.shape
    if K % 2 == 0:
        raise ConfigurationError(f"conv1d kernel width must be odd, got {K}")
    if x.ndim != 2 or x.shape[1] != c_in:
        raise DimensionError(f"conv1d input {x.shape} incompatible with kernel {kernel.shape}")
    T = x.shape[0]
    pad = K // 2
    padded = np.zeros((T + K - 1, c_in))
    padded[pad:pad + T] = x.data
    cols = np.concatenate([padded[k:k + T] for k in range(K)], axis=1)  # [T, K*C_in]
    w2 = kernel.data.reshape(K * c_in, c_out)
    out = cols @ w2
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        dw = (cols.T @ g).reshape(K, c_in, c_out)
        dcols = g @ w2.T
        dpad = np.zeros_like(padded)
        for k in range(K):
            dpad[k:k + T] += dcols[:, k * c_in:(k + 1) * c_in]
        grads = (dpad[pad:pad + T], dw)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make("conv1d", out, inputs, backward_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the gradient scatters back into those rows."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = int(ids[(ids < 0) | (ids >= V)][0])
        raise VocabularyError(f"id {bad} outside table of {V} rows")
    shape = table.shape

    def backward_fn(g):
        dt = np.zeros(shape)
        np.add.at(dt, ids, g)
        return (dt,)

    return _make("gather", table.data[ids], (table,), backward_fn)


gather_rows = embedding_lookup


# ---------------------------------------------------------------- backward


@dataclass
class ComputationTape:
    """Recorded outputs in topological order (inputs before consumers)."""

    outputs: list[Tensor]

    @classmethod
    def from_output(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited or t._node is None:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for inp in reversed(t._node.inputs):
                if inp._node is not None and id(inp) not in visited:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.outputs)

    def is_topological(self) -> bool:
        position = {id(t): i for i, t in enumerate(self.outputs)}
        for i, t in enumerate(self.outputs):
            for inp in t._node.inputs:
                if inp._node is not None and position.get(id(inp), len(self.outputs)) >= i:
                    return False
        return True


def backward(loss: Tensor) -> ComputationTape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return ComputationTape([])
    tape = ComputationTape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out in reversed(tape.outputs):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        node = out._node
        for inp, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                pending[key] = ig if key not in pending else pending[key] + ig
    return tape


# ---------------------------------------------------------------- gradient check


def grad_check_many(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    n_samples: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` closes over ``params`` and returns a scalar tensor.  With
    ``n_samples`` only that many coordinates, drawn uniformly over all
    parameter elements, are probed.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    if n_samples is None or n_samples >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, size=n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with no_grad():
        for k in flat:
            which = int(np.searchsorted(offsets, k, side="right") - 1)
            idx = int(k - offsets[which])
            view = params[which].data.reshape(-1)
            orig = view[idx]
            view[idx] = orig + step
            fp = f().item()
            view[idx] = orig - step
            fm = f().item()
            view[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite value during finite differencing")
            cd = (fp - fm) / (2.0 * step)
            a = analytic[which].reshape(-1)[idx]
            worst = max(worst, abs(a - cd) / max(abs(a), abs(cd), 1e-8))
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
               n_samples: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error of d f(x)/dx against central differences."""
    if not np.isfinite(x.data).all():
        raise NumericError("grad_check input contains non-finite values")
    x.requires_grad = True
    return grad_check_many(lambda: f(x), [x], step, n_samples, seed)
