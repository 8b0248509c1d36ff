"""Dense float64 arrays with a recorded reverse-mode gradient tape.

Every differentiable operation runs eagerly on numpy and, while a
:class:`Tape` is active and at least one input requires gradients,
appends a backward rule to the tape. Replaying the tape in reverse
order accumulates ``dL/dx`` into the ``grad`` buffer of every
gradient-requiring tensor reachable from the loss.

The op set is deliberately small: broadcast-aware elementwise
arithmetic, batched matmul, reductions, shape moves, an embedding
gather, and a masked row softmax. Anything fancier is composed from
these or registered by downstream modules through :func:`record`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DegenerateRowError",
    "EvaluationError",
    "record",
    "active_tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "embedding",
    "softmax_rows",
    "check_gradient",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entries."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite value."""


def _as_f64(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


class Tensor:
    """Dense float64 array (row-major) plus an optional gradient buffer.

    Data is treated as immutable once constructed; only ``grad``
    accumulates, and only during backward passes. ``requires_grad`` is
    set by the caller on leaves (parameters, checked inputs) and is
    switched on automatically for recorded op outputs.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Stop-gradient view: same values, no recording, no grad flow."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; ops executed inside the block are
    recorded. :meth:`backward` replays the records in reverse, which
    touches each recorded node at most once, and flushes the summed
    gradient of every gradient-requiring leaf into its ``grad`` buffer
    exactly once per pass. Tensors produced by :meth:`Tensor.detach`
    never appear on the tape, so they contribute zero upstream.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate dloss/dx into ``x.grad`` for every recorded leaf.

        ``loss`` must be scalar unless an explicit ``seed`` of matching
        shape is given.
        """
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError("backward() needs a scalar loss or an explicit seed")
            seed = np.ones_like(loss.data)
        pending: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, seed)}
        for node in reversed(self._nodes):
            entry = pending.pop(id(node.output), None)
            if entry is None:
                continue
            grads = node.backward(entry[1])
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in pending:
                    pending[key] = (inp, pending[key][1] + g)
                else:
                    pending[key] = (inp, g)
        for tensor, g in pending.values():
            if not tensor.requires_grad:
                continue
            g = np.array(g, dtype=np.float64, copy=True) if not isinstance(g, np.ndarray) or not g.flags.writeable else g
            tensor.grad = g if tensor.grad is None else tensor.grad + g


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Attach a backward rule for ``out = op(*inputs)`` to the active tape.

    ``backward(g)`` receives dL/dout and must return one gradient array
    (or None) per input, each shaped like the corresponding input. The
    call is a no-op when no tape is active or no input requires grad.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(inputs, out, backward))
    return out


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return record(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data / b.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * out.data / b.data, b.data.shape)
        return ga, gb

    return record(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(-a.data)
    return record(out, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return record(out, (a, b), backward)


def exp(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.exp(a.data))
    return record(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.log(a.data))
    return record(out, (a,), lambda g: (g / a.data,))


def _normalize_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        gg = g
        if not keepdims:
            for d in sorted(axes):
                gg = np.expand_dims(gg, d)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return record(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for d in axes:
        count *= a.data.shape[d]

    def backward(g):
        gg = g / count
        if not keepdims:
            for d in sorted(axes):
                gg = np.expand_dims(gg, d)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return record(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)
    return record(out, (a,), lambda g: (np.transpose(g, inv),))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` by integer ``ids``; scatter-add on backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {weight.data.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = Tensor(weight.data[ids])

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.data.shape[-1]))
        return (gw,)

    return record(out, (weight,), backward)


def softmax_rows(x, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax over the last axis with hard-zero masked entries.

    Subtracts the per-row max over unmasked entries before
    exponentiating, so large logits never overflow. Masked positions
    come out exactly 0 and receive exactly zero gradient; each row of
    unmasked entries sums to 1 up to f64 rounding.

    ``mask`` is boolean, broadcastable to ``x``; True marks a usable
    entry. A row with no unmasked entry raises DegenerateRowError.
    """
    x = _coerce(x)
    if mask is None:
        masked = x.data
    else:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every entry masked")
        masked = np.where(mask, x.data, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    denom = e.sum(axis=-1, keepdims=True)
    p = e / denom
    out = Tensor(p)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return record(out, (x,), backward)


@dataclass
class GradCheckReport:
    """Outcome of a central-finite-difference gradient check."""

    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    tol: float
    worst_index: Optional[int] = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def check_gradient(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    zero_floor: float = 1e-6,
    max_components: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare taped gradients of a scalar ``f(x)`` to central differences.

    The tape gradient is computed once; each checked component ``i`` is
    then probed with ``(f(x + h e_i) - f(x - h e_i)) / 2h``. Per
    component the relative error is ``|a - b| / max(|a|, |b|,
    zero_floor)``, so noise on a genuinely zero gradient does not blow
    up the report. When ``max_components`` is given and smaller than
    ``x.size``, a seeded uniform subsample of components is probed.
    """
    if not np.isfinite(x.data).all():
        raise EvaluationError("check_gradient input is not finite")
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ShapeError("check_gradient expects a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise EvaluationError("function value is not finite")
    tape.backward(y)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1)

    flat = x.data.reshape(-1)
    n = flat.size
    if max_components is not None and max_components < n:
        idxs = np.random.default_rng(seed).choice(n, size=max_components, replace=False)
    else:
        idxs = np.arange(n)

    max_err, err_sum, worst = 0.0, 0.0, None
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value while probing component {i}")
        fd = (fp - fm) / (2.0 * step)
        a = analytic[i]
        rel = abs(a - fd) / max(abs(a), abs(fd), zero_floor)
        err_sum += rel
        if rel > max_err:
            max_err, worst = rel, int(i)
    n_checked = len(idxs)
    return GradCheckReport(
        max_rel_error=max_err,
        mean_rel_error=err_sum / max(n_checked, 1),
        n_checked=n_checked,
        tol=tol,
        worst_index=worst,
    )
