"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, TapeError, no_grad


class NonDeterministicError(RuntimeError):
    """The function under test returned different values for identical inputs."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict = field(default_factory=dict)
    worst: tuple = ()

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __bool__(self) -> bool:
        return self.passed

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"gradcheck {verdict}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.1e})"


def _scalar(out) -> float:
    if isinstance(out, Tensor):
        out = out.data
    arr = np.asarray(out, dtype=np.float64)
    if arr.size != 1:
        raise TapeError(f"finite_diff_check needs a scalar function, got shape {arr.shape}")
    return float(arr.reshape(()))


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      tol: float = 1e-4, floor: float = 1e-6,
                      max_elements: int | None = None, rng=None) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against central differences.

    ``f`` takes no arguments and closes over ``params``; each parameter is
    perturbed in place.  The relative error of one element is
    ``|a - n| / max(|a|, |n|, floor)``, so gradients that are both tiny are
    compared absolutely.

    Args:
        f: builds the scalar loss from the current parameter values.
        params: 64-bit leaf tensors.
        h: perturbation step.
        tol: pass threshold on the maximum relative error.
        floor: denominator floor.
        max_elements: if set, check at most this many randomly chosen
            elements per parameter (drawn with ``rng``).

    Raises:
        NonDeterministicError: two evaluations at the base point differ.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"finite_diff_check needs float64 parameters, got {p.dtype} "
                            f"for {p.name or p.shape}")
        if not p.requires_grad:
            raise ValueError(f"parameter {p.name or p.shape} does not require grad")

    for p in params:
        p.grad = None
    loss = f()
    base = _scalar(loss)
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    with no_grad():
        again = _scalar(f())
    if again != base:
        raise NonDeterministicError(f"f() returned {base!r} then {again!r} at the same point")

    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(0.0, tol)
    for pi, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idxs = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = _scalar(f())
                flat[i] = orig - h
                fm = _scalar(f())
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(ga.reshape(-1)[i])
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            if rel > worst:
                worst = rel
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (p.name or f"param{pi}", int(i), a, num)
        report.per_param[p.name or f"param{pi}"] = worst
    return report
