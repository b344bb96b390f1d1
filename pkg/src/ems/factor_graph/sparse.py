"""Real sparse systems in coordinate form, plus the coordinate text format."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SparseFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Square real matrix ``A`` stored as unique ``(row, col, value)`` triplets.

    ``symmetric`` tags a pattern-symmetric matrix; general matrices are
    ordered and analyzed on the pattern of ``A + A^T``.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    symmetric: bool = True
    _keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be >= 1")
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=float)
        if not (rows.shape == cols.shape == vals.shape) or rows.ndim != 1:
            raise ValueError("rows, cols and vals must be 1-d arrays of equal length")
        if rows.size and (rows.min() < 0 or cols.min() < 0
                          or rows.max() >= self.n or cols.max() >= self.n):
            raise ValueError("entry index out of range")
        keys = rows * self.n + cols
        if np.unique(keys).size != keys.size:
            raise ValueError("duplicate (row, col) entries")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "vals", vals)
        object.__setattr__(self, "_keys", keys)

    @classmethod
    def from_dense(cls, a, symmetric: bool | None = None, keep_zeros: bool = False):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        mask = np.ones_like(a, dtype=bool) if keep_zeros else a != 0
        r, c = np.nonzero(mask)
        if symmetric is None:
            symmetric = bool(np.array_equal(mask, mask.T))
        return cls(a.shape[0], r, c, a[r, c], symmetric)

    @classmethod
    def from_scipy(cls, m, symmetric: bool | None = None):
        """Build from any scipy sparse matrix; explicit zeros are kept as pattern."""
        coo = m.tocoo()
        coo.sum_duplicates()
        if symmetric is None:
            pat = set(zip(coo.row.tolist(), coo.col.tolist()))
            symmetric = all((c, r) in pat for r, c in pat)
        return cls(coo.shape[0], coo.row, coo.col, coo.data, symmetric)

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    def max_abs(self) -> float:
        return float(np.abs(self.vals).max()) if self.vals.size else 0.0

    def with_values(self, vals) -> "SparseSystem":
        return SparseSystem(self.n, self.rows, self.cols, vals, self.symmetric)

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self.rows, self.cols] = self.vals
        return a

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.bincount(self.rows, weights=self.vals * x[self.cols], minlength=self.n)


def write_coordinate(sys: SparseSystem, path) -> None:
    """Write ``row col value`` lines (0-based) after a ``%`` dimension header."""
    lines = [f"% n {sys.n}"]
    lines += [f"{r} {c} {v!r}" for r, c, v in zip(sys.rows.tolist(), sys.cols.tolist(),
                                                     sys.vals.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_coordinate(path) -> SparseSystem:
    n = None
    rows, cols, vals = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("%"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "n":
                n = int(parts[1])
            continue
        parts = line.split()
        if len(parts) != 3:
            raise SparseFormatError(f"line {lineno}: expected 'row col value'")
        try:
            rows.append(int(parts[0]))
            cols.append(int(parts[1]))
            vals.append(float(parts[2]))
        except ValueError as exc:
            raise SparseFormatError(f"line {lineno}: {exc}") from None
    if n is None:
        n = max(max(rows, default=-1), max(cols, default=-1)) + 1
    return SparseSystem(n, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                        np.array(vals), symmetric=_pattern_symmetric(rows, cols))


def _pattern_symmetric(rows, cols) -> bool:
    pat = set(zip(rows, cols))
    return all((c, r) in pat for r, c in pat)
