"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Tensors created with
:meth:`Tape.variable` are tracked; every primitive whose inputs include a
tracked tensor appends a node to that tape. Tensors built directly from
arrays are constants and never receive gradient.

    tape = Tape()
    x = tape.variable(np.ones(3))
    y = ops.mul(x, 2.0)
    grads = tape.backward(y, np.ones(3))
    grads[x]  # -> array([2., 2., 2.])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradMap",
    "TapeError",
    "ShapeError",
    "as_tensor",
    "record",
    "unbroadcast",
    "finite_diff_hessian",
    "finite_diff_grad",
]

_ids = itertools.count()


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = "tracked" if self.tracked else "const"
        return f"Tensor(shape={self.shape}, {flag})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradMap(dict):
    """Gradients keyed by tensor id; indexing with a Tensor returns zeros
    for tensors the tape never reached."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            got = dict.get(self, key.id)
            return np.zeros_like(key.data) if got is None else got
        return dict.__getitem__(self, key)


class Tape:
    """Single-use record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def variable(self, data) -> Tensor:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        return Tensor(np.array(data, dtype=np.float64), tape=self)

    def backward(self, output: Tensor, output_grad=None) -> GradMap:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if output.tape is not self:
            raise TapeError("output tensor was not produced on this tape")
        seed = np.ones_like(output.data) if output_grad is None else np.asarray(output_grad, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"output_grad shape {seed.shape} != output shape {output.shape}")
        self.consumed = True

        grads: dict[int, np.ndarray] = {output.id: seed.copy()}
        for node in reversed(self.nodes):
            g = grads.get(node.output.id)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or t.tape is not self:
                    continue
                if t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi
        self.nodes.clear()
        return GradMap(grads)


def _common_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("inputs belong to different tapes")
    if tape is not None and tape.consumed:
        raise TapeError("tape already consumed by backward()")
    return tape


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` and, if any input is tracked, log the node.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    tape = _common_tape(inputs)
    out = Tensor(out_data, tape=tape)
    if tape is not None:
        tape.nodes.append(_Node(tuple(inputs), out, backward))
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def finite_diff_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return out


def finite_diff_hessian(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of a scalar function, symmetrized."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64).reshape(-1)
    n = x.size
    h = np.zeros((n, n))

    def f(v):
        val = float(fn(v))
        if not np.isfinite(val):
            raise FloatingPointError("non-finite function value in finite-difference stencil")
        return val

    f0 = f(x)
    for i in range(n):
        for j in range(i, n):
            if i == j:
                xp, xm = x.copy(), x.copy()
                xp[i] += step
                xm[i] -= step
                h[i, i] = (f(xp) - 2 * f0 + f(xm)) / step**2
                continue
            vals = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                v = x.copy()
                v[i] += si * step
                v[j] += sj * step
                vals.append(f(v))
            h[i, j] = h[j, i] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4 * step**2)
    return 0.5 * (h + h.T)
