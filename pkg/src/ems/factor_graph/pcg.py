"""Preconditioned conjugate gradient with an LU-factor preconditioner."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import NumericFactors, solve
from .sparse import SparseSystem


@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual: float        # final ||b - A x||_2 / ||b||_2


def pcg_solve(sys: SparseSystem, b, precond: NumericFactors | None = None,
              tol: float = 1e-10, max_iter: int | None = None, x0=None) -> PCGResult:
    """CG on an SPD ``sys``; ``precond`` factors (typically of a nearby matrix) act as M.

    With ``precond=None`` this is plain CG. Non-convergence is reported in the
    result, never raised.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != (sys.n,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({sys.n},)")
    if precond is not None and precond.n != sys.n:
        raise ValueError("preconditioner dimension mismatch")
    max_iter = 10 * sys.n if max_iter is None else max_iter
    bnorm = float(np.linalg.norm(b))
    x = np.zeros(sys.n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return PCGResult(np.zeros(sys.n), 0, True, 0.0)
    r = b - sys.matvec(x)
    rn = float(np.linalg.norm(r))
    if rn <= tol * bnorm:
        return PCGResult(x, 0, True, rn / bnorm)

    def apply_m(v):
        return v.copy() if precond is None else solve(precond, v)

    z = apply_m(r)
    p = z.copy()
    rz = float(r @ z)
    it = 0
    while it < max_iter:
        ap = sys.matvec(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        it += 1
        rn = float(np.linalg.norm(r))
        if rn <= tol * bnorm:
            return PCGResult(x, it, True, rn / bnorm)
        z = apply_m(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PCGResult(x, it, False, rn / bnorm)
