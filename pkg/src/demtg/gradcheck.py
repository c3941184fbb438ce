"""Central finite-difference checks of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import ParamStore, Tape, Tensor, make_rng


@dataclass
class Offender:
    path: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float

    def __str__(self):
        return (f"{self.path}{list(self.index)} analytic={self.analytic:.10g} "
                f"numeric={self.numeric:.10g} rel_err={self.rel_err:.3e}")


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    n_checked: int
    worst: Offender | None
    failures: list[Offender] = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        worst = f" worst: {self.worst}" if self.worst else ""
        return f"{status} ({self.n_checked} coords, tol {self.tol:g}){worst}"


def analytic_grads(f: Callable[[ParamStore], Tensor], params: ParamStore) -> dict[str, np.ndarray]:
    params.zero_grad()
    with Tape() as tape:
        out = f(params)
    tape.backward(out)
    return {path: params.grad(path).copy() for path in params}


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(1e-6, abs(a), abs(n))


def _eval_at(f, params: ParamStore, path: str, base: np.ndarray, idx, h: float) -> float:
    bumped = base.copy()
    bumped[idx] = base[idx] + h
    params.set(path, bumped)
    try:
        return f(params).item()
    finally:
        params.set(path, base)


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-5,
               tol: float = 1e-5, coords_per_param: int | None = None, seed: int = 0,
               only: list[str] | None = None, refine: bool = True) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` against central differences.

    ``coords_per_param`` limits the check to that many randomly chosen
    coordinates of each parameter (``None`` checks every coordinate). ``f``
    must be deterministic, so batch norm has to run in eval mode.

    With ``refine`` a coordinate that misses ``tol`` is measured again with
    the fourth-order central stencil at the same ``eps``, which removes the
    O(eps^2) truncation error that dominates tiny gradients.
    """
    grads = analytic_grads(f, params)
    rng = make_rng(seed)
    worst = None
    failures = []
    n_checked = 0
    for path in list(params):
        if only is not None and path not in only:
            continue
        base = params[path].data.copy()
        flat_n = base.size
        if coords_per_param is None or coords_per_param >= flat_n:
            picks = np.arange(flat_n)
        else:
            picks = np.sort(rng.choice(flat_n, size=coords_per_param, replace=False))
        for flat in picks:
            idx = np.unravel_index(flat, base.shape)
            at = lambda h: _eval_at(f, params, path, base, idx, h)
            numeric = (at(eps) - at(-eps)) / (2.0 * eps)
            analytic = float(grads[path][idx])
            rel = _rel(analytic, numeric)
            if refine and rel > tol:
                numeric = (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps)
                rel = _rel(analytic, numeric)
            n_checked += 1
            off = Offender(path, tuple(int(i) for i in idx), analytic, numeric, rel)
            if worst is None or rel > worst.rel_err:
                worst = off
            if rel > tol:
                failures.append(off)
    return GradCheckReport(not failures, tol, n_checked, worst, failures)
