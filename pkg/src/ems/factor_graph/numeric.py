"""Level-scheduled numeric LU on a fixed symbolic structure, and F/B substitution.

Pivots in one elimination-tree level never touch each other's L columns or U
rows, so each level is processed as a batch; the Schur updates of a level are
applied in pivot order at the level barrier. That fixed application order is
what makes the threaded path produce the same bits as the serial one.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .sparse import SparseSystem
from .symbolic import SymbolicStructure

PIVOT_RTOL = 1e-12


class SingularMatrixError(ArithmeticError):
    def __init__(self, vertex: int, pivot: float):
        super().__init__(f"near-zero pivot {pivot:.3e} at vertex {vertex}")
        self.vertex = vertex
        self.pivot = pivot


@dataclass(frozen=True, eq=False)
class NumericFactors:
    sym: SymbolicStructure
    vals: np.ndarray

    @property
    def n(self) -> int:
        return self.sym.n

    @property
    def pivots(self) -> np.ndarray:
        return np.abs(self.vals[: self.sym.n])

    def dense_lu(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(L, U)`` in pivot space; ``L @ U == P A P^T``."""
        n = self.sym.n
        L = np.eye(n)
        U = np.diag(self.vals[:n])
        for lv in self.sym.levels:
            for local, k in enumerate(lv.pivots.tolist()):
                a, b = lv.lptr[local], lv.lptr[local + 1]
                rows = self.sym.lrows[k]
                L[rows, k] = self.vals[lv.lslots[a:b]]
                U[k, rows] = self.vals[lv.lslots[a:b] + rows.size]
        return L, U


def _load(sys: SparseSystem, sym: SymbolicStructure) -> np.ndarray:
    vals = np.zeros(sym.nslots)
    vals[sym.slots_for(sys)] = sys.vals
    return vals


def _check_pivots(vals, piv, sym, thresh):
    d = np.abs(vals[piv])
    bad = d <= thresh
    if bad.any():
        k = int(piv[bad][0])
        raise SingularMatrixError(int(sym.perm[k]), float(vals[k]))


def factorize(sys: SparseSystem, sym: SymbolicStructure, workers: int | None = None) -> NumericFactors:
    """Numeric LU of ``sys`` on the pattern fixed by ``sym`` (no pivoting).

    ``workers > 1`` computes the per-pivot work of each level on a thread
    pool; results are bit-identical to the serial path.
    """
    vals = _load(sys, sym)
    thresh = PIVOT_RTOL * sys.max_abs()
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            for lv in sym.levels:
                _check_pivots(vals, lv.pivots, sym, thresh)
                prods = list(pool.map(lambda j: _pivot_task(vals, lv, j), range(lv.pivots.size)))
                if lv.target.size:
                    np.subtract.at(vals, lv.target, np.concatenate(prods))
    else:
        for lv in sym.levels:
            _check_pivots(vals, lv.pivots, sym, thresh)
            if lv.lslots.size:
                vals[lv.lslots] /= vals[lv.lpiv_diag]
                np.subtract.at(vals, lv.target, vals[lv.src_l] * vals[lv.src_u])
    return NumericFactors(sym, vals)


def _pivot_task(vals, lv, j):
    a, b = lv.lptr[j], lv.lptr[j + 1]
    if a == b:
        return np.zeros(0)
    ls = lv.lslots[a:b]
    vals[ls] /= vals[lv.lpiv_diag[a:b]]
    u0, u1 = lv.uptr[j], lv.uptr[j + 1]
    return vals[lv.src_l[u0:u1]] * vals[lv.src_u[u0:u1]]


def solve(fac: NumericFactors, b) -> np.ndarray:
    """Solve ``A x = b`` by forward then backward substitution over the levels."""
    sym = fac.sym
    b = np.asarray(b, dtype=float)
    if b.shape != (sym.n,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({sym.n},)")
    vals = fac.vals
    y = b[sym.perm].copy()
    for lv in sym.levels:
        if lv.fw_rows.size:
            np.subtract.at(y, lv.fw_rows, vals[lv.lslots] * y[lv.fw_cols])
    x = y
    for lv in reversed(sym.levels):
        piv = lv.pivots
        if lv.bw_cols.size:
            s = np.bincount(lv.bw_local, weights=vals[lv.uslots] * x[lv.bw_cols],
                            minlength=piv.size)
            x[piv] = (x[piv] - s) / vals[piv]
        else:
            x[piv] = x[piv] / vals[piv]
    out = np.empty(sym.n)
    out[sym.perm] = x
    return out
