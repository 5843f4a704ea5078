"""Minimal reverse-mode differentiation over a fixed set of array primitives.

A :class:`Tape` records primitive applications in execution order; each
primitive carries a forward rule returning ``(value, saved)`` and a
vector-Jacobian rule mapping an output cotangent back to its inputs.
Only primitives registered with :func:`define_primitive` can be recorded.

Example::

    tape = Tape()
    x = tape.input(np.array(3.0))
    y = tape.record("square", x)
    tape.backward(y)[x]   # -> 6.0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import grid

__all__ = [
    "Primitive",
    "PRIMITIVES",
    "define_primitive",
    "Tape",
    "Var",
    "call",
    "grad_check",
    "dot_product_test",
]


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[Any, Any]]
    vjp: Callable[..., tuple]
    # indices of inputs that are differentiable arrays
    diff_args: tuple[int, ...] = field(default=(0,))


PRIMITIVES: dict[str, Primitive] = {}


def define_primitive(name: str, forward, vjp, diff_args: Sequence[int] = (0,)) -> Primitive:
    prim = Primitive(name, forward, vjp, tuple(diff_args))
    PRIMITIVES[name] = prim
    return prim


class Var:
    """A value produced on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: Tape, index: int, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return self.tape.record("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.record("sub", self, other)

    def __rsub__(self, other):
        return self.tape.record("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.record("scale", self, c=float(other))
        return self.tape.record("mul", self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.record("scale", self, c=-1.0)

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"


@dataclass
class _Node:
    prim: Primitive | None
    inputs: tuple  # Var indices (int) or None for constants
    saved: Any
    params: dict


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as they execute, so the record is topologically
    ordered by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[Any] = []

    def input(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node(None, (), None, {}))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def record(self, name: str, *inputs, **params) -> Var:
        try:
            prim = PRIMITIVES[name]
        except KeyError:
            raise ValueError(f"unregistered primitive {name!r}") from None
        args, ids = [], []
        for a in inputs:
            if isinstance(a, Var):
                if a.tape is not self:
                    raise ValueError("input belongs to a different tape")
                args.append(a.value)
                ids.append(a.index)
            else:
                args.append(a)
                ids.append(None)
        value, saved = prim.forward(*args, **params)
        self.nodes.append(_Node(prim, tuple(ids), saved, params))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def backward(self, loss: Var) -> "Gradients":
        """Accumulate cotangents from a scalar ``loss`` back to every node."""
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if np.ndim(loss.value) != 0:
            raise ValueError(f"loss must be scalar, got shape {np.shape(loss.value)}")
        cot: dict[int, Any] = {loss.index: np.float64(1.0)}
        for i in range(loss.index, -1, -1):
            node = self.nodes[i]
            if node.prim is None:
                continue
            g = cot.pop(i, None)
            if g is None:
                continue
            grads = node.prim.vjp(g, node.saved, **node.params)
            for j, src in enumerate(node.inputs):
                if src is None or j not in node.prim.diff_args or grads[j] is None:
                    continue
                if src in cot:
                    cot[src] = cot[src] + grads[j]
                else:
                    cot[src] = grads[j]
        return Gradients(self, cot)


class Gradients:
    """Input cotangents keyed by :class:`Var`; unreachable inputs get zeros."""

    def __init__(self, tape: Tape, cot: dict):
        self._tape = tape
        self._cot = cot

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._cot.get(var.index)
        if g is None:
            return np.zeros_like(self._tape.values[var.index])
        return np.asarray(g, dtype=np.float64).reshape(np.shape(var.value))


def call(tape: Tape | None, name: str, *inputs, **params):
    """Apply a primitive, recording it when ``tape`` is given."""
    if tape is None:
        return PRIMITIVES[name].forward(*inputs, **params)[0]
    return tape.record(name, *inputs, **params)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def _bcast_back(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


define_primitive(
    "add",
    lambda a, b: (a + b, (np.shape(a), np.shape(b))),
    lambda g, s: (_bcast_back(g, s[0]), _bcast_back(g, s[1])),
    diff_args=(0, 1),
)
define_primitive(
    "sub",
    lambda a, b: (a - b, (np.shape(a), np.shape(b))),
    lambda g, s: (_bcast_back(g, s[0]), -_bcast_back(g, s[1])),
    diff_args=(0, 1),
)
define_primitive(
    "mul",
    lambda a, b: (a * b, (a, b)),
    lambda g, s: (_bcast_back(g * s[1], np.shape(s[0])), _bcast_back(g * s[0], np.shape(s[1]))),
    diff_args=(0, 1),
)
define_primitive("scale", lambda a, c: (c * a, None), lambda g, s, c: (c * g,))
define_primitive("square", lambda a: (a * a, a), lambda g, a: (2.0 * a * g,))
define_primitive(
    "clamp_min",
    lambda a, lo=0.0: (np.maximum(a, lo), a > lo),
    lambda g, mask, lo=0.0: (g * mask,),
)
define_primitive("sum", lambda a: (np.sum(a), np.shape(a)), lambda g, shp: (np.full(shp, g, dtype=np.float64),))
define_primitive(
    "mean",
    lambda a: (np.mean(a), np.shape(a)),
    lambda g, shp: (np.full(shp, g / max(int(np.prod(shp)), 1), dtype=np.float64),),
)

# ---------------------------------------------------------------------------
# grid primitives


define_primitive(
    "gaussian_blur",
    lambda f, sigma: (grid.gaussian_blur(f, sigma), None),
    lambda g, s, sigma: (grid.gaussian_blur(g, sigma),),
)


def _warp_fwd(img, u):
    if img.shape[:2] != u.shape[:2]:
        raise ValueError(f"image shape {img.shape[:2]} does not match field shape {u.shape[:2]}")
    grid.check_field(u, img.shape[:2], "displacement")
    return grid.sample_saving(img, u)


def _warp_vjp(g, s):
    return grid.sample_vjp_saved(s, g)


define_primitive("warp", _warp_fwd, _warp_vjp, diff_args=(0, 1))


def _grad_fwd(f):
    gx, gy = grid.spatial_gradient(f)
    return np.stack([gx, gy], axis=-1), None


define_primitive(
    "spatial_gradient",
    _grad_fwd,
    lambda g, s: (grid.spatial_gradient_adjoint(g[..., 0], g[..., 1]),),
)


# ---------------------------------------------------------------------------
# validation harness


def _fd_central(fn, values, k, flat_index, eps):
    plus = [v.copy() for v in values]
    minus = [v.copy() for v in values]
    plus[k].flat[flat_index] += eps
    minus[k].flat[flat_index] -= eps
    return (float(fn(*plus)) - float(fn(*minus))) / (2 * eps)


def grad_check(
    fn: Callable,
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-5,
    n_samples: int = 64,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn(tape, *vars)`` must return a scalar :class:`Var` when traced; it is
    also evaluated untraced (with a fresh tape) for the differences. Returns
    the maximum relative error over a random subsample of at least
    ``n_samples`` coordinates per input (all of them for small inputs).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    values = [np.array(v, dtype=np.float64) for v in inputs]

    def scalar(*vals):
        t = Tape()
        return fn(t, *[t.input(v) for v in vals]).value

    tape = Tape()
    vars_ = [tape.input(v) for v in values]
    grads = tape.backward(fn(tape, *vars_))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, v in enumerate(values):
        analytic = grads[vars_[k]]
        size = v.size
        idx = np.arange(size) if size <= n_samples else rng.choice(size, n_samples, replace=False)
        for i in idx:
            a = float(analytic.flat[i])
            b = _fd_central(scalar, values, k, i, epsilon)
            worst = max(worst, abs(a - b) / max(abs(a), abs(b), 1e-8))
    return worst


def dot_product_test(
    forward: Callable[..., np.ndarray],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray]],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    epsilon: float = 1e-5,
) -> float:
    """Relative mismatch between ``<J dx, dy>`` and ``<dx, J^T dy>``.

    ``J dx`` is applied by a central difference of ``forward`` at step
    ``epsilon`` along a random tangent; ``vjp(dy)`` returns the input
    cotangents at the base point.
    """
    rng = np.random.default_rng(seed)
    values = [np.asarray(v, dtype=np.float64) for v in inputs]
    dxs = [rng.standard_normal(v.shape) for v in values]
    out = np.asarray(forward(*values))
    dy = rng.standard_normal(out.shape)
    plus = forward(*[v + epsilon * d for v, d in zip(values, dxs)])
    minus = forward(*[v - epsilon * d for v, d in zip(values, dxs)])
    jdx = (np.asarray(plus) - np.asarray(minus)) / (2 * epsilon)
    lhs = float(np.sum(jdx * dy))
    cots = vjp(dy)
    rhs = float(sum(np.sum(np.asarray(c) * d) for c, d in zip(cots, dxs)))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-30)
