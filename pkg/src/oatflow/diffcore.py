"""Small reverse-mode autodiff over float64 numpy arrays, plus Adam and gradient clipping.

Only the operations needed by the MLP velocity field and the flow-matching
losses are supported. Every op checks its output for non-finite values and
raises :class:`NonFiniteError` naming the op.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    return out


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray. Leaf tensors created directly carry no
    parents; ``requires_grad`` marks leaves whose gradient is wanted.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = "leaf"):
        self.data = _check(np.asarray(data, dtype=np.float64), op)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only row-broadcast of a bias vector (or scalar) is supported
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    if len(shape) == 2 and shape[0] == 1 and g.ndim == 2 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    raise ValueError(f"unsupported broadcast {g.shape} -> {shape}")


def _node(data, parents, op, backward) -> Tensor:
    out = Tensor(data, _parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accum(g * c)

    return _node(a.data * c, (a,), "scale", backward)


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _node(a.data + c, (a,), "add_scalar", lambda g: a._accum(g))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def selu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0
    ex = np.exp(np.minimum(x, 0.0))
    out = SELU_SCALE * np.where(pos, x, SELU_ALPHA * (ex - 1.0))

    def backward(g):
        a._accum(g * SELU_SCALE * np.where(pos, 1.0, SELU_ALPHA * ex))

    return _node(out, (a,), "selu", backward)


def cos(a: Tensor) -> Tensor:
    return _node(np.cos(a.data), (a,), "cos", lambda g: a._accum(-g * np.sin(a.data)))


def sin(a: Tensor) -> Tensor:
    return _node(np.sin(a.data), (a,), "sin", lambda g: a._accum(g * np.cos(a.data)))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), "square", lambda g: a._accum(2.0 * g * a.data))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _node(a.data.sum(), (a,), "sum", lambda g: a._accum(np.broadcast_to(g, a.shape)))

    def backward(g):
        a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(a.data.sum(axis=axis), (a,), "sum", backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(a.data.mean(), (a,), "mean", lambda g: a._accum(np.broadcast_to(g / n, a.shape)))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            t._accum(part)

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), "concat", backward)


def block(flat: Tensor, start: int, shape: tuple[int, ...]) -> Tensor:
    """View a contiguous slice of a flat parameter tensor as ``shape``."""
    n = int(np.prod(shape))
    stop = start + n

    def backward(g):
        if flat.requires_grad:
            if flat.grad is None:
                flat.grad = np.zeros_like(flat.data)
            flat.grad[start:stop] += g.reshape(-1)

    return _node(flat.data[start:stop].reshape(shape), (flat,), "block", backward)


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter array with a named block layout.

    ``layout`` maps block names to ``(offset, shape)``; blocks are disjoint and
    cover the whole array in declaration order.
    """

    data: np.ndarray
    layout: tuple[tuple[str, int, tuple[int, ...]], ...]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 1:
            raise ValueError("ParamVector data must be one-dimensional")
        object.__setattr__(self, "data", data)
        offset = 0
        for name, start, shape in self.layout:
            if start != offset:
                raise ValueError(f"layout block '{name}' is not contiguous")
            offset += int(np.prod(shape))
        if offset != data.size:
            raise ValueError(f"layout covers {offset} entries, data has {data.size}")

    def __len__(self) -> int:
        return self.data.size

    def blocks(self) -> dict[str, np.ndarray]:
        return {n: self.data[s : s + int(np.prod(sh))].reshape(sh) for n, s, sh in self.layout}

    def with_data(self, data: np.ndarray) -> ParamVector:
        return ParamVector(np.asarray(data, dtype=np.float64).copy(), self.layout)


def value_and_grad(loss: Callable[[Tensor], Tensor], params) -> tuple[float, np.ndarray]:
    """Evaluate ``loss`` on a fresh leaf built from ``params`` and backpropagate."""
    data = params.data if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    leaf = Tensor(data.copy(), requires_grad=True)
    out = loss(leaf)
    if out.data.size != 1:
        raise ValueError("loss must be scalar")
    if not out.requires_grad:
        return float(out.data), np.zeros_like(data)
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(data)
    return float(out.data), _check(g, "backward")


def grad(loss: Callable[[Tensor], Tensor], params) -> np.ndarray:
    return value_and_grad(loss, params)[1]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), **kw)

    def copy(self) -> AdamState:
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.beta1, self.beta2, self.eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not mutated."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, step, b1, b2, state.eps)


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = float(np.linalg.norm(grads))
    if norm <= max_norm:
        return grads
    return grads * (max_norm / norm)
