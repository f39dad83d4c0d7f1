"""Dense float64 tensors with a dynamic reverse-mode tape, plus SGD/Adam.

Only the handful of primitives the recommender and discriminators need are
provided. Every op records itself on the active :class:`Tape` when any input
requires a gradient; ``Tape.backward`` then walks the records in reverse.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError("item() on a non-scalar tensor")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    appended in execution order, so the list is topologically sorted.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        self.records.append((out, inputs, rule))

    def backward(self, loss: Tensor) -> None:
        if loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss was not produced on this tape")
        # Intermediates carry gradients only within one traversal.
        for out, _, _ in self.records:
            out.grad = None
        loss.grad = np.ones_like(loss.values)
        for out, inputs, rule in reversed(self.records):
            if out.grad is None:
                continue
            grads = rule(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    t.grad += g


def _emit(values: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is None:
            raise ContractError("differentiable op executed outside of a Tape")
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _emit(av @ bv, (a, b), rule)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sa, sb = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values - b.values
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sa, sb = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.values * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    # np.maximum keeps NaN visible so divergence is not silently zeroed.
    return _emit(np.maximum(a.values, 0.0), (a,), lambda g: (g * mask,))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    try:
        out = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, parts, rule)


def repeat_rows(a, n: int) -> Tensor:
    """Tile a 1-D tensor into an ``n x d`` matrix."""
    a = as_tensor(a)
    if a.values.ndim != 1:
        raise ShapeError(f"repeat_rows expects a vector, got {a.shape}")
    return _emit(np.broadcast_to(a.values, (n, a.shape[0])).copy(), (a,),
                 lambda g: (g.sum(axis=0),))


def squeeze_row(a) -> Tensor:
    """``1 x d`` -> ``d``."""
    a = as_tensor(a)
    if a.values.ndim != 2 or a.shape[0] != 1:
        raise ShapeError(f"expected a single row, got {a.shape}")
    return _emit(a.values[0], (a,), lambda g: (g[None, :],))


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.asarray(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def tensor_mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.values.size
    return _emit(np.asarray(a.values.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, shape),))


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` may be a single vector with an integer target, or an
    ``n x C`` matrix with a length-``n`` integer target array.
    """
    logits = as_tensor(logits)
    x = logits.values
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    t = np.atleast_1d(np.asarray(target))
    if not np.issubdtype(t.dtype, np.integer):
        raise IndexError("class targets must be integers")
    n, c = x2.shape
    if t.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {t.shape}")
    if n and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"target out of range for {c} classes")
    logp = log_softmax(x2)
    loss = -logp[np.arange(n), t].mean()

    def rule(g):
        d = np.exp(logp)
        d[np.arange(n), t] -= 1.0
        d *= g / n
        return (d[0] if single else d,)

    return _emit(np.asarray(loss), (logits,), rule)


def affine_relu_stack(x, layers: Sequence[tuple[Tensor, Tensor]], final_linear: bool = True) -> Tensor:
    """Apply ``x <- relu(x W + b)`` per layer; the last layer stays linear if asked."""
    h = as_tensor(x)
    squeeze = h.values.ndim == 1
    if squeeze:
        h = _emit(h.values[None, :], (h,), lambda g: (g[0],))
    for k, (w, b) in enumerate(layers):
        h = add(matmul(h, w), b)
        if not (final_linear and k == len(layers) - 1):
            h = relu(h)
    if squeeze:
        h = _emit(h.values[0], (h,), lambda g: (g[None, :],))
    return h


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def clip_global_norm(params: Iterable[Tensor], max_norm: float | None) -> float:
    """Rescale grads in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm is not None and max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * factor
    return total


class Optimizer:
    """SGD or Adam over a fixed list of tensors.

    ``step(sign="ascend")`` moves along the update direction instead of
    against it; that is how the discriminator half of the min-max game is
    applied.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, kind: str = "sgd",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.params = list(params)
        self.lr = lr
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        if kind == "adam":
            self.m = [np.zeros_like(p.values) for p in self.params]
            self.v = [np.zeros_like(p.values) for p in self.params]
        else:
            self.m = self.v = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, sign: str = "descend") -> None:
        if sign not in ("descend", "ascend"):
            raise ValueError(f"sign must be 'descend' or 'ascend', not {sign!r}")
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"missing gradient on {p!r}")
        direction = -1.0 if sign == "descend" else 1.0
        if self.kind == "sgd":
            for p in self.params:
                p.values += direction * self.lr * p.grad
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.values += direction * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "t": self.t,
                "m": None if self.m is None else [a.copy() for a in self.m],
                "v": None if self.v is None else [a.copy() for a in self.v]}
