"""Symbolic analysis: fill pattern, elimination tree, and level schedule.

All structure is expressed in the *permuted* index space (pivot order). The
numeric phase works on one flat value array whose slot layout is fixed here,
so any matrix with a compatible pattern can be refactorized without redoing
this step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ordering import adjacency, order
from .sparse import SparseSystem

DENSE_MAP_LIMIT = 1 << 22     # use a flat key->slot table below this many n*n entries


@dataclass(frozen=True, eq=False)
class FactorLevel:
    """Index program for one level of pivots (independent of one another)."""

    pivots: np.ndarray
    diag: np.ndarray          # diag slot of every pivot
    lslots: np.ndarray        # L(i, k) slots, pivot-major
    lpiv_diag: np.ndarray     # diag slot of the owning pivot, aligned with lslots
    lptr: np.ndarray          # per-pivot offsets into lslots
    target: np.ndarray        # Schur-update targets
    src_l: np.ndarray
    src_u: np.ndarray
    uptr: np.ndarray          # per-pivot offsets into target/src arrays
    # triangular solve programs
    fw_rows: np.ndarray
    fw_cols: np.ndarray
    bw_local: np.ndarray
    bw_cols: np.ndarray
    uslots: np.ndarray


@dataclass(frozen=True, eq=False)
class SymbolicStructure:
    n: int
    perm: np.ndarray          # pivot k -> original index
    iperm: np.ndarray         # original index -> pivot position
    parent: np.ndarray        # elimination tree parent (pivot space), -1 for roots
    level: np.ndarray         # longest path from the leaves, per pivot
    lrows: tuple              # sorted row pattern of L column k (rows > k)
    levels: tuple             # FactorLevel per level, bottom-up
    nslots: int
    input_keys: np.ndarray    # sorted original keys r*n+c of the analyzed pattern
    input_slots: np.ndarray
    input_lower_nnz: int      # strictly-lower nnz of the symmetrized permuted input

    @property
    def nnz_l(self) -> int:
        return int(sum(len(r) for r in self.lrows))

    @property
    def fill_in(self) -> int:
        return self.nnz_l - self.input_lower_nnz

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def level_sets(self) -> list[np.ndarray]:
        return [lv.pivots for lv in self.levels]

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(self.n)]
        for v, p in enumerate(self.parent.tolist()):
            if p >= 0:
                kids[p].append(v)
        return kids

    def fill_pattern(self) -> set[tuple[int, int]]:
        """Off-diagonal (i, j) positions of L+U in pivot space, diagonal included."""
        pat = {(k, k) for k in range(self.n)}
        for k, rows in enumerate(self.lrows):
            for i in rows.tolist():
                pat.add((i, k))
                pat.add((k, i))
        return pat

    def slots_for(self, sys: SparseSystem) -> np.ndarray:
        """Slot of every entry of ``sys``; raises if the pattern is not covered."""
        if sys.n != self.n:
            raise ValueError(f"dimension {sys.n} does not match structure dimension {self.n}")
        keys = sys.keys
        pos = np.searchsorted(self.input_keys, keys)
        pos = np.minimum(pos, self.input_keys.size - 1)
        bad = self.input_keys[pos] != keys
        if bad.any():
            k = int(keys[bad][0])
            raise ValueError(f"entry ({k // self.n}, {k % self.n}) is outside the analyzed pattern")
        return self.input_slots[pos]


def elimination_structure(adj: list[set[int]], perm: np.ndarray, iperm: np.ndarray):
    """Column patterns of L and the elimination tree for the given order."""
    n = len(adj)
    struct = [set() for _ in range(n)]
    for k in range(n):
        struct[k] = {int(iperm[u]) for u in adj[int(perm[k])] if iperm[u] > k}
    parent = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        s = struct[k]
        if s:
            p = min(s)
            parent[k] = p
            struct[p] |= s
            struct[p].discard(p)
    lrows = tuple(np.array(sorted(s), dtype=np.int64) for s in struct)
    return lrows, parent


def tree_levels(parent: np.ndarray) -> np.ndarray:
    """Longest path from the leaves; children always precede parents in pivot order."""
    level = np.zeros(parent.size, dtype=np.int64)
    for v, p in enumerate(parent.tolist()):
        if p >= 0 and level[p] < level[v] + 1:
            level[p] = level[v] + 1
    return level


def symbolic_analyze(sys: SparseSystem, perm=None) -> SymbolicStructure:
    n = sys.n
    perm = order(sys) if perm is None else np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("perm is not a permutation of range(n)")
    iperm = np.empty(n, dtype=np.int64)
    iperm[perm] = np.arange(n)

    adj = adjacency(sys)
    input_lower = sum(len(a) for a in adj) // 2
    lrows, parent = elimination_structure(adj, perm, iperm)
    level = tree_levels(parent)

    # slot layout: diagonals, then per pivot its L column followed by its U row
    lstart = np.empty(n, dtype=np.int64)
    nslots = n
    for k in range(n):
        lstart[k] = nslots
        nslots += 2 * len(lrows[k])
    keys, slots = [np.arange(n) * (n + 1)], [np.arange(n)]
    for k in range(n):
        rows = lrows[k]
        m = rows.size
        if m:
            keys.append(rows * n + k)                       # L(i, k)
            slots.append(lstart[k] + np.arange(m))
            keys.append(k * n + rows)                       # U(k, i)
            slots.append(lstart[k] + m + np.arange(m))
    keys = np.concatenate(keys)
    slots = np.concatenate(slots)
    order_ = np.argsort(keys)
    all_keys, all_slots = keys[order_], slots[order_]

    if n * n <= DENSE_MAP_LIMIT:
        slot_map = np.empty(n * n, dtype=np.int64)
        slot_map[all_keys] = all_slots

        def lookup(k: np.ndarray) -> np.ndarray:
            return slot_map[k]
    else:
        def lookup(k: np.ndarray) -> np.ndarray:
            return all_slots[np.searchsorted(all_keys, k)]

    in_keys = np.unique(sys.keys)
    r, c = in_keys // n, in_keys % n
    in_slots = lookup(iperm[r] * n + iperm[c])

    empty = np.zeros(0, dtype=np.int64)
    by_level: dict[int, list[int]] = {}
    for k in range(n):
        by_level.setdefault(int(level[k]), []).append(k)
    levels = []
    for lv in sorted(by_level):
        piv = np.array(by_level[lv], dtype=np.int64)
        lsl, ldg, lptr = [], [], [0]
        tgt, sl, su, uptr = [], [], [], [0]
        fr, fc, bl, bc, us = [], [], [], [], []
        for local, k in enumerate(piv.tolist()):
            rows = lrows[k]
            m = rows.size
            ls = lstart[k] + np.arange(m)
            usl = ls + m
            lsl.append(ls)
            ldg.append(np.full(m, k, dtype=np.int64))
            lptr.append(lptr[-1] + m)
            if m:
                tgt.append((rows[:, None] * n + rows[None, :]).ravel())
                sl.append(np.repeat(ls, m))
                su.append(np.tile(usl, m))
            uptr.append(uptr[-1] + m * m)
            fr.append(rows)
            fc.append(np.full(m, k, dtype=np.int64))
            bl.append(np.full(m, local, dtype=np.int64))
            bc.append(rows)
            us.append(usl)

        def cat(parts):
            return np.concatenate(parts) if parts else empty

        levels.append(FactorLevel(
            pivots=piv, diag=piv.copy(), lslots=cat(lsl), lpiv_diag=cat(ldg),
            lptr=np.array(lptr, dtype=np.int64), target=lookup(cat(tgt)), src_l=cat(sl),
            src_u=cat(su), uptr=np.array(uptr, dtype=np.int64), fw_rows=cat(fr),
            fw_cols=cat(fc), bw_local=cat(bl), bw_cols=cat(bc), uslots=cat(us)))

    return SymbolicStructure(
        n=n, perm=perm, iperm=iperm, parent=parent, level=level, lrows=lrows,
        levels=tuple(levels), nslots=int(nslots), input_keys=in_keys,
        input_slots=in_slots, input_lower_nnz=int(input_lower))
