"""Central finite-difference gradient checking.

Every analytic gradient in the package funnels through ``check_gradient``:
central differences at eps = 1e-4, relative error below 1e-4 on float64
inputs, with a guard that skips coordinates sitting on hinge/abs kinks
(where the two one-sided slopes disagree). A deliberate corruption hook
exists so the harness itself can be shown to catch wrong gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import UsageError

DEFAULT_EPS = 1e-4
DEFAULT_TOL = 1e-4


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    checked: int
    skipped_kinks: int
    passed: bool
    worst_index: tuple = ()

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{self.name}: {status} max_rel_err={self.max_rel_error:.3e} "
            f"checked={self.checked} kinks_skipped={self.skipped_kinks}"
        )


@dataclass
class GradCheckSuite:
    reports: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def lines(self) -> list:
        return [r.line() for r in self.reports]


def check_gradient(
    fn: Callable[[np.ndarray], float],
    grad: np.ndarray,
    x: np.ndarray,
    name: str = "fn",
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
    corrupt: float = 0.0,
) -> GradCheckReport:
    """Compare an analytic gradient against central differences.

    ``fn`` maps a float64 array with the shape of ``x`` to a scalar.
    ``corrupt`` adds a constant to the analytic gradient first (negative
    control; any nonzero value must make the check fail on generic data).
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64) + corrupt
    if grad.shape != x.shape:
        raise UsageError(f"gradient shape {grad.shape} does not match input {x.shape}")
    if eps <= 0 or tol <= 0:
        raise UsageError("eps and tol must be positive")

    max_rel = 0.0
    worst = ()
    checked = 0
    kinks = 0
    base = float(fn(x))
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += eps
        fp = float(fn(xp))
        xm = x.copy()
        xm[idx] -= eps
        fm = float(fn(xm))
        # One-sided slopes disagreeing flags a kink crossing; skip it.
        right = (fp - base) / eps
        left = (base - fm) / eps
        scale_k = max(abs(right), abs(left), 1.0)
        if abs(right - left) > 1e-2 * scale_k:
            kinks += 1
            continue
        numeric = (fp - fm) / (2.0 * eps)
        analytic = float(grad[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        checked += 1
        if rel > max_rel:
            max_rel = rel
            worst = idx
    if checked == 0:
        raise UsageError(f"{name}: every coordinate sat on a kink; nothing checked")
    return GradCheckReport(
        name=name,
        max_rel_error=max_rel,
        checked=checked,
        skipped_kinks=kinks,
        passed=max_rel < tol,
        worst_index=worst,
    )
