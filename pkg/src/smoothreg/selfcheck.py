"""Adjoint and finite-difference checks for every registered primitive.

Each case builds a small random instance, then reports

* the dot-product mismatch ``|<J dx, dy> - <dx, J^T dy>|`` (relative), and
* the worst relative error of reverse-mode gradients of ``<w, f(x)>``
  against central differences.
"""

from __future__ import annotations

import contextlib
import dataclasses
from dataclasses import dataclass
import numpy as np

from . import diffeo, energy, smoothproper  # noqa: F401  (registers primitives)
from .adjoint import PRIMITIVES, Tape, dot_product_test, grad_check
from .smoothproper import init_basis

__all__ = ["CheckCase", "cases", "run_checks", "ALIASES", "corrupted"]

# command-line friendly names
ALIASES = {"blur": "gaussian_blur", "grad": "spatial_gradient", "reg": "diffusive_reg"}


@dataclass
class CheckCase:
    name: str
    inputs: list  # primitive arguments, all differentiable
    params: dict


def cases(seed: int = 0) -> list[CheckCase]:
    rng = np.random.default_rng(seed)
    n = 12
    img = rng.random((n, n))
    u = 1.5 * rng.standard_normal((n, n, 2))
    small = 0.4 * rng.standard_normal((n, n, 2))
    B = init_basis(9)
    return [
        CheckCase("add", [rng.standard_normal((4, 5)), rng.standard_normal((4, 5))], {}),
        CheckCase("sub", [rng.standard_normal((4, 5)), rng.standard_normal((5,))], {}),
        CheckCase("mul", [rng.standard_normal((4, 5)), rng.standard_normal((4, 5))], {}),
        CheckCase("scale", [rng.standard_normal((4, 5))], {"c": -1.7}),
        CheckCase("square", [rng.standard_normal((4, 5))], {}),
        # keep entries away from the kink
        CheckCase("clamp_min", [np.sign(z := rng.standard_normal(20)) * (0.1 + np.abs(z))], {"lo": 0.0}),
        CheckCase("sum", [rng.standard_normal((4, 5))], {}),
        CheckCase("mean", [rng.standard_normal((4, 5))], {}),
        CheckCase("gaussian_blur", [rng.standard_normal((n, n, 2))], {"sigma": 1.5}),
        CheckCase("warp", [img, u], {}),
        CheckCase("spatial_gradient", [rng.standard_normal((n, n))], {}),
        CheckCase("lncc", [img, rng.random((n, n))], {"window": 5, "variance_floor": 1e-5}),
        CheckCase("diffusive_reg", [rng.standard_normal((n, n, 2))], {}),
        CheckCase(
            "q_update",
            [np.abs(rng.standard_normal((6, 6, 9))), rng.standard_normal((6, 6, 2)), B],
            {"alpha": 1.5},
        ),
        CheckCase(
            "displacement_update",
            [rng.standard_normal((6, 6, 2)), rng.standard_normal((6, 6, 2)), B],
            {"alpha": 5.0},
        ),
        CheckCase("combine", [np.abs(rng.standard_normal((6, 6, 9))), B], {}),
        CheckCase("compose", [small, u], {}),
    ]


@contextlib.contextmanager
def corrupted(name: str, factor: float = 1.01):
    """Temporarily scale one primitive's first cotangent (negative control)."""
    orig = PRIMITIVES[name]

    def bad_vjp(*a, **k):
        out = list(orig.vjp(*a, **k))
        out[0] = factor * np.asarray(out[0])
        return tuple(out)

    PRIMITIVES[name] = dataclasses.replace(orig, vjp=bad_vjp)
    try:
        yield
    finally:
        PRIMITIVES[name] = orig


def _dot_error(case: CheckCase, seed: int) -> float:
    prim = PRIMITIVES[case.name]

    def forward(*vals):
        return prim.forward(*vals, **case.params)[0]

    def vjp(dy):
        _, saved = prim.forward(*case.inputs, **case.params)
        return prim.vjp(dy, saved, **case.params)

    return dot_product_test(forward, vjp, case.inputs, seed=seed)


def _fd_error(case: CheckCase, seed: int) -> float:
    rng = np.random.default_rng(seed + 1)
    out = PRIMITIVES[case.name].forward(*case.inputs, **case.params)[0]
    w = rng.standard_normal(np.shape(out))

    def fn(tape: Tape, *vars_):
        y = tape.record(case.name, *vars_, **case.params)
        if np.ndim(y.value) == 0:
            return y * float(w)
        return tape.record("sum", tape.record("mul", y, w))

    return grad_check(fn, case.inputs, seed=seed)


def run_checks(names=None, seed: int = 0) -> dict[str, dict[str, float]]:
    """Run both checks; ``names`` filters by primitive name or alias."""
    wanted = None if names is None else {ALIASES.get(n, n) for n in names}
    all_cases = cases(seed)
    if wanted is not None:
        unknown = wanted - {c.name for c in all_cases}
        if unknown:
            raise ValueError(f"unknown primitive(s): {', '.join(sorted(unknown))}")
    report = {}
    for case in all_cases:
        if wanted is not None and case.name not in wanted:
            continue
        report[case.name] = {"dot": _dot_error(case, seed), "fd": _fd_error(case, seed)}
    return report
