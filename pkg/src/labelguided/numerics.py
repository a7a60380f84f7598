"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` owns a flat ``name -> ndarray`` parameter map.  Every forward
pass builds a fresh graph on a fresh tape; :meth:`Tape.backward` walks the
recorded nodes in reverse creation order and returns one gradient per
parameter (zeros for parameters the loss never touched).

Only what the detector needs is here: 2-D (and batched 3-D) matmul, row-wise
softmax, elementwise nonlinearities, gathers, segment max-pooling and a few
fused losses.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Iterable, Mapping, MutableMapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """A value in the graph.  ``grad`` is filled by :meth:`Tape.backward`."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "tape", "name")

    def __init__(self, value, tape: "Tape | None" = None, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        self.name = name
        if tape is not None and (backward_fn is not None or name is not None):
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}{', name=' + self.name if self.name else ''})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Record of one forward pass over a parameter map.

    ``params`` is read through :meth:`param`; every read is logged in
    ``accessed`` so callers can prove which parameters a pass touched.
    """

    def __init__(self, params: Mapping[str, np.ndarray]):
        self.params = params
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}
        self.accessed: set[str] = set()

    def param(self, name: str) -> Tensor:
        leaf = self.leaves.get(name)
        if leaf is None:
            self.accessed.add(name)
            leaf = Tensor(self.params[name], tape=self, name=name)
            self.leaves[name] = leaf
        return leaf

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
        grads = {}
        for name, value in self.params.items():
            leaf = self.leaves.get(name)
            if leaf is not None and leaf.grad is not None:
                grads[name] = leaf.grad
            else:
                grads[name] = np.zeros_like(value)
        return grads


# -- graph helpers -----------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs) -> "Tape | None":
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.tape is None:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(value, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return Tensor(value, tape=tape, parents=tuple(parents), backward_fn=backward_fn)


def constant(value) -> Tensor:
    return Tensor(value)


def detach(x: Tensor) -> Tensor:
    """Same value, no gradient path."""
    return Tensor(x.value)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _node(a.value - b.value, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: _accumulate(x, g * mask))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.value)
    return _node(out, (x,), lambda g: _accumulate(x, g * out * (1.0 - out)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: _accumulate(x, g * out))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.value), (x,), lambda g: _accumulate(x, g / x.value))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.value)
    return _node(np.abs(x.value), (x,), lambda g: _accumulate(x, g * sign))


def square(x: Tensor) -> Tensor:
    return _node(x.value * x.value, (x,), lambda g: _accumulate(x, 2.0 * g * x.value))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


# -- reductions --------------------------------------------------------------

def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = x.shape
    return _node(np.sum(x.value), (x,), lambda g: _accumulate(x, np.broadcast_to(g, shape)))


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return mul(total(x), 1.0 / n)


def sum_rows(x: Tensor) -> Tensor:
    """Sum along the last axis, keeping it (shape ``(..., 1)``)."""
    shape = x.shape
    return _node(x.value.sum(axis=-1, keepdims=True), (x,),
                 lambda g: _accumulate(x, np.broadcast_to(g, shape)))


def frobenius_norm(x: Tensor) -> Tensor:
    val = math.sqrt(float(np.sum(x.value * x.value)))

    def back(g):
        if val > 0.0:
            _accumulate(x, g * x.value / val)

    return _node(np.float64(val), (x,), back)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        if a.tape is not None:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape))
        if b.tape is not None:
            if a.value.ndim == 3 and b.value.ndim == 2:
                ga = a.value.reshape(-1, a.shape[-1])
                _accumulate(b, ga.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape))

    return _node(np.matmul(a.value, b.value), (a, b), back)


def transpose(x: Tensor) -> Tensor:
    return _node(np.swapaxes(x.value, -1, -2), (x,),
                 lambda g: _accumulate(x, np.swapaxes(g, -1, -2)))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting each row max."""
    if np.isnan(x.value).any():
        raise NumericError("softmax_rows received NaN")
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _node(out, (x,), back)


# -- shape / indexing --------------------------------------------------------

def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(old)))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows of a 2-D tensor; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _node(x.value[index], (x,), back)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        _accumulate(x, full)

    return _node(x.value[..., start:stop], (x,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(x, g[tuple(sl)])

    return _node(np.concatenate([x.value for x in xs], axis=axis), xs, back)


def group_max(x: Tensor, group: int) -> Tensor:
    """Max over consecutive blocks of ``group`` rows: ``(R*group, C) -> (R, C)``."""
    rows, ch = x.shape
    if rows % group:
        raise ShapeError(f"{rows} rows do not split into groups of {group}")
    blocks = x.value.reshape(rows // group, group, ch)
    arg = blocks.argmax(axis=1)
    out = np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]

    def back(g):
        full = np.zeros_like(blocks)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        _accumulate(x, full.reshape(rows, ch))

    return _node(out, (x,), back)


def segment_max(x: Tensor, starts: Sequence[int]) -> Tensor:
    """Max over contiguous row segments beginning at ``starts`` (all non-empty)."""
    starts = np.asarray(starts, dtype=np.int64)
    rows, ch = x.shape
    ends = np.append(starts[1:], rows)
    if np.any(ends <= starts):
        raise ShapeError("segment_max needs non-empty segments")
    out = np.maximum.reduceat(x.value, starts, axis=0)
    seg = np.repeat(np.arange(len(starts)), ends - starts)
    hit = x.value == out[seg]
    # first maximal row per (segment, channel) receives the gradient
    first = np.zeros_like(hit)
    for s, (lo, hi) in enumerate(zip(starts, ends)):
        block = hit[lo:hi]
        idx = block.argmax(axis=0)
        first[lo + idx, np.arange(ch)] = True

    def back(g):
        _accumulate(x, np.where(first, g[seg], 0.0))

    return _node(out, (x,), back)


# -- losses ------------------------------------------------------------------

def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean BCE on probabilities clamped to ``[1e-12, 1 - 1e-12]``."""
    t = np.asarray(targets, dtype=np.float64).reshape(probs.shape)
    n = probs.value.size
    if n == 0:
        raise ShapeError("binary_cross_entropy of an empty batch")
    p = np.clip(probs.value, BCE_CLAMP, 1.0 - BCE_CLAMP)
    val = -np.sum(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)) / n
    inside = (probs.value > BCE_CLAMP) & (probs.value < 1.0 - BCE_CLAMP)

    def back(g):
        _accumulate(probs, g * inside * (-(t / p) + (1.0 - t) / (1.0 - p)) / n)

    return _node(val, (probs,), back)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean BCE of ``sigmoid(logits)`` against 0/1 targets, computed stably."""
    z = logits.value
    t = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    n = z.size
    val = np.sum(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))) / n

    def back(g):
        _accumulate(logits, g * (_stable_sigmoid(z) - t) / n)

    return _node(val, (logits,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` over rows."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(s)
    val = -np.sum(logp[np.arange(n), labels]) / n

    def back(g):
        d = e / s
        d[np.arange(n), labels] -= 1.0
        _accumulate(logits, g * d / n)

    return _node(val, (logits,), back)


# -- gradient oracle ---------------------------------------------------------

def finite_diff_check(
    loss_fn: Callable[[Tape], Tensor],
    params: MutableMapping[str, np.ndarray],
    eps: float = 1e-6,
    grads: Mapping[str, np.ndarray] | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` builds a scalar on the tape it is given.  Pass ``grads`` to
    check a supplied gradient instead of the tape's own.  The error per entry
    is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if grads is None:
        tape = Tape(params)
        grads = tape.backward(loss_fn(tape))
    worst = 0.0
    for name in names if names is not None else list(params):
        base = params[name]
        flat = base.reshape(-1)
        if not np.shares_memory(flat, base):
            raise ValueError(f"parameter {name} is not contiguous; cannot perturb in place")
        analytic = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn(Tape(params)).value)
            flat[i] = orig - eps
            down = float(loss_fn(Tape(params)).value)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# -- optimisation ------------------------------------------------------------

def group_of(name: str) -> str:
    return name.split(".", 1)[0]


class SGD:
    """SGD with heavy-ball momentum (``v = mu*v + g; p -= lr*v``)."""

    def __init__(self, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             groups: Iterable[str]) -> list[str]:
        """Update parameters whose group prefix is in ``groups``; return their names."""
        groups = set(groups)
        if not groups:
            logger.warning("optimizer step with an empty group mask; nothing updated")
            return []
        updated = []
        for name in sorted(params):
            if group_of(name) not in groups:
                continue
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = params[name] - self.lr * v
            updated.append(name)
        return updated
