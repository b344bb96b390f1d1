"""Fast-decoupled power flow (XB variant) with reusable B'/B'' factorizations."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .factor_graph import (NumericFactors, SparseSystem, SymbolicStructure, factorize, order,
                           solve, symbolic_analyze)
from .grid_model import BusBranchGraph, BusType, GridModelError, build_admittance
from .ntp import without_islands

TOL = 1e-8
MAX_HALF_ITER = 50
EXTREME_Q = 5.0       # per-unit; PV buses beyond this are flagged (no Q limits enforced)


class PowerFlowError(GridModelError):
    pass


@dataclass(frozen=True, eq=False)
class StateVector:
    """Voltage magnitude and angle per bus, aligned with ``bus_ids``."""

    bus_ids: np.ndarray
    v: np.ndarray
    theta: np.ndarray

    def complex(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)

    def as_dict(self) -> dict[int, tuple[float, float]]:
        return {int(b): (float(v), float(t)) for b, v, t in zip(self.bus_ids, self.v, self.theta)}

    def aligned(self, bus_ids) -> "StateVector":
        pos = {int(b): i for i, b in enumerate(self.bus_ids)}
        idx = np.array([pos[int(b)] for b in bus_ids], dtype=np.int64)
        return StateVector(np.asarray(bus_ids), self.v[idx], self.theta[idx])

    def max_diff(self, other: "StateVector") -> tuple[float, float]:
        o = other.aligned(self.bus_ids)
        return float(np.abs(self.v - o.v).max(initial=0.0)), float(np.abs(self.theta - o.theta).max(initial=0.0))


@dataclass(eq=False)
class DecoupledSystem:
    """B' over non-slack buses, B'' over PQ buses, plus the network admittance.

    Symbolic structures and numeric factors are filled in lazily and cached;
    once factorized the object is treated as read-only and may be shared.
    """

    graph: BusBranchGraph                 # energized analysis view
    bus_ids: np.ndarray
    slack: np.ndarray                     # positions into bus_ids
    pv: np.ndarray
    pq: np.ndarray
    pvpq: np.ndarray
    ybus: sp.csr_matrix
    bp: SparseSystem | None
    bpp: SparseSystem | None
    sym_p: SymbolicStructure | None = None
    sym_pp: SymbolicStructure | None = None
    fac_p: NumericFactors | None = None
    fac_pp: NumericFactors | None = None
    timings: dict = field(default_factory=dict)

    @property
    def analyzed(self) -> bool:
        return (self.bp is None or self.sym_p is not None) and (self.bpp is None or self.sym_pp is not None)

    def analyze(self) -> "DecoupledSystem":
        t0 = time.perf_counter()
        if self.bp is not None:
            self.sym_p = symbolic_analyze(self.bp, order(self.bp))
        if self.bpp is not None:
            self.sym_pp = symbolic_analyze(self.bpp, order(self.bpp))
        self.timings["symbolic"] = time.perf_counter() - t0
        return self

    def factorize(self, workers: int | None = None) -> "DecoupledSystem":
        if not self.analyzed:
            self.analyze()
        t0 = time.perf_counter()
        if self.bp is not None:
            self.fac_p = factorize(self.bp, self.sym_p, workers)
        if self.bpp is not None:
            self.fac_pp = factorize(self.bpp, self.sym_pp, workers)
        self.timings["numeric"] = time.perf_counter() - t0
        return self

    @property
    def factorized(self) -> bool:
        return (self.bp is None or self.fac_p is not None) and (self.bpp is None or self.fac_pp is not None)

    def scheduled(self) -> np.ndarray:
        buses = self.graph.buses
        return np.array([complex(buses[int(b)].p_inj, buses[int(b)].q_inj) for b in self.bus_ids])

    def v_setpoints(self) -> np.ndarray:
        buses = self.graph.buses
        return np.array([buses[int(b)].v_set if buses[int(b)].type is not BusType.PQ
                         and buses[int(b)].v_set is not None else 1.0 for b in self.bus_ids])


@dataclass(eq=False)
class PowerFlowResult:
    state: StateVector
    converged: bool
    p_half: int
    q_half: int
    mismatch_history: list[float]
    timings: dict
    flagged_pv: list[int] = field(default_factory=list)
    solver_iterations: list[int] = field(default_factory=list)

    @property
    def half_iterations(self) -> int:
        return self.p_half + self.q_half


def _laplacian(n: int, f, t, w, diag_extra=None) -> sp.csr_matrix:
    f = np.asarray(f, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    w = np.asarray(w, dtype=float)
    rows = np.concatenate([f, t, f, t])
    cols = np.concatenate([f, t, t, f])
    data = np.concatenate([w, w, -w, -w])
    m = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    if diag_extra is not None:
        m = m + sp.diags(diag_extra)
    return m


def _restrict(m: sp.csr_matrix, idx: np.ndarray) -> SparseSystem | None:
    if idx.size == 0:
        return None
    sub = m[idx][:, idx].tocoo()
    return SparseSystem(idx.size, sub.row, sub.col, sub.data, symmetric=True)


def build_decoupled(graph: BusBranchGraph) -> DecoupledSystem:
    """XB scheme: B' from 1/x only; B'' = -Im(Y) with charging, shunts and taps."""
    t0 = time.perf_counter()
    g = without_islands(graph)
    if not g.buses:
        raise PowerFlowError("no energized buses")
    ids = g.bus_ids
    types = [g.buses[int(b)].type for b in ids]
    islands = {}
    for b in ids:
        bus = g.buses[int(b)]
        islands.setdefault(bus.island, 0)
        if bus.type is BusType.SLACK:
            islands[bus.island] += 1
    for isl, count in islands.items():
        if count != 1:
            raise PowerFlowError(f"island {isl} has {count} slack buses, expected 1")
    adm = build_admittance(g)
    ybus = adm.matrix()
    idx = g.index
    f, t, w = [], [], []
    for br in g.branches.values():
        if br.in_service:
            f.append(idx[br.from_bus])
            t.append(idx[br.to_bus])
            w.append(1.0 / br.x)
    bp_full = _laplacian(ids.size, f, t, w)
    bpp_full = (-ybus.imag).tocsr()
    slack = np.array([i for i, ty in enumerate(types) if ty is BusType.SLACK], dtype=np.int64)
    pv = np.array([i for i, ty in enumerate(types) if ty is BusType.PV], dtype=np.int64)
    pq = np.array([i for i, ty in enumerate(types) if ty is BusType.PQ], dtype=np.int64)
    pvpq = np.array([i for i, ty in enumerate(types) if ty is not BusType.SLACK], dtype=np.int64)
    ds = DecoupledSystem(g, ids, slack, pv, pq, pvpq, ybus, _restrict(bp_full, pvpq),
                         _restrict(bpp_full, pq))
    ds.timings["build"] = time.perf_counter() - t0
    return ds


def compute_mismatch(graph_or_sys, state: StateVector):
    """``(dP, dQ)`` per bus in ``state.bus_ids`` order: scheduled minus computed."""
    if isinstance(graph_or_sys, DecoupledSystem):
        ybus, sched = graph_or_sys.ybus, graph_or_sys.scheduled()
        state = state.aligned(graph_or_sys.bus_ids)
    else:
        g = graph_or_sys
        ybus = build_admittance(g).matrix()
        state = state.aligned(g.bus_ids)
        sched = np.array([complex(b.p_inj, b.q_inj) for b in g.buses.values()])
    v = state.complex()
    s = v * np.conj(ybus @ v)
    mis = sched - s
    return mis.real, mis.imag


def flat_state(ds: DecoupledSystem) -> StateVector:
    return StateVector(ds.bus_ids.copy(), ds.v_setpoints(), np.zeros(ds.bus_ids.size))


def _start(ds: DecoupledSystem, warm: StateVector | None) -> tuple[np.ndarray, np.ndarray]:
    if warm is None:
        s = flat_state(ds)
        return s.v.copy(), s.theta.copy()
    # buses missing from the warm state (e.g. created by a bus split) start flat
    pos = {int(b): i for i, b in enumerate(warm.bus_ids)}
    have = np.array([int(b) in pos for b in ds.bus_ids])
    src = np.array([pos.get(int(b), 0) for b in ds.bus_ids], dtype=np.int64)
    v = np.where(have, warm.v[src], 1.0) if warm.bus_ids.size else np.ones(ds.bus_ids.size)
    th = np.where(have, warm.theta[src], 0.0) if warm.bus_ids.size else np.zeros(ds.bus_ids.size)
    fixed = np.concatenate([ds.slack, ds.pv])
    v[fixed] = ds.v_setpoints()[fixed]
    th[ds.slack] = 0.0
    return v, th


def fdpf_solve(ds: DecoupledSystem, warm: StateVector | None = None, tol: float = TOL,
               max_half: int = MAX_HALF_ITER, linear_solver=None) -> PowerFlowResult:
    """Alternate P-half (B' dθ = dP/V) and Q-half (B'' dV = dQ/V) updates.

    Convergence is judged on the full AC mismatch at non-slack buses (P) and
    PQ buses (Q). ``linear_solver(which, rhs)`` overrides the factor solves
    (used by the PCG contingency scheme); it returns ``(x, iterations)``.
    """
    timings = {}
    t0 = time.perf_counter()
    v, th = _start(ds, warm)
    sched = ds.scheduled()
    timings["initialization"] = time.perf_counter() - t0 + ds.timings.get("build", 0.0)
    t0 = time.perf_counter()
    if linear_solver is None and not ds.analyzed:
        ds.analyze()
    timings["symbolic"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if linear_solver is None and not ds.factorized:
        ds.factorize()
    timings["numeric"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pvpq, pq = ds.pvpq, ds.pq
    ybus = ds.ybus
    history: list[float] = []
    solver_its: list[int] = []

    def mismatch():
        vc = v * np.exp(1j * th)
        mis = sched - vc * np.conj(ybus @ vc)
        dp, dq = mis.real[pvpq], mis.imag[pq]
        worst = max(np.abs(dp).max(initial=0.0), np.abs(dq).max(initial=0.0),
                    np.abs(dp / v[pvpq]).max(initial=0.0), np.abs(dq / v[pq]).max(initial=0.0))
        history.append(float(worst))
        return dp, dq, worst

    def lin(which, rhs):
        if linear_solver is not None:
            x, its = linear_solver(which, rhs)
            solver_its.append(its)
            return x
        return solve(ds.fac_p if which == "p" else ds.fac_pp, rhs)

    p_half = q_half = 0
    dp, dq, worst = mismatch()
    converged = worst < tol
    while not converged and p_half + q_half < max_half:
        if pvpq.size:
            th[pvpq] += lin("p", dp / v[pvpq])
            p_half += 1
            dp, dq, worst = mismatch()
            if worst < tol:
                converged = True
                break
            if p_half + q_half >= max_half:
                break
        if pq.size:
            v[pq] += lin("q", dq / v[pq])
            q_half += 1
            dp, dq, worst = mismatch()
            converged = worst < tol
        elif not pvpq.size:
            break
    timings["solve"] = time.perf_counter() - t0
    timings["total"] = sum(timings[k] for k in ("initialization", "symbolic", "numeric", "solve"))

    state = StateVector(ds.bus_ids.copy(), v, th)
    flagged = []
    if ds.pv.size:
        vc = state.complex()
        q = (vc * np.conj(ybus @ vc)).imag
        flagged = [int(ds.bus_ids[i]) for i in ds.pv if abs(q[i]) > EXTREME_Q]
    return PowerFlowResult(state, bool(converged), p_half, q_half, history, timings, flagged,
                           solver_its)


def branch_flows(graph: BusBranchGraph, state: StateVector):
    """Complex power entering each in-service branch at both ends, keyed by branch id."""
    from .grid_model import branch_terms

    vs = dict(zip(state.bus_ids.tolist(), state.complex()))
    out = {}
    for br in graph.branches.values():
        if not br.in_service or br.from_bus not in vs or br.to_bus not in vs:
            continue
        yff, yft, ytf, ytt = branch_terms(br)
        vf, vt = vs[br.from_bus], vs[br.to_bus]
        out[br.id] = (vf * np.conj(yff * vf + yft * vt), vt * np.conj(ytf * vf + ytt * vt))
    return out


def run_powerflow(graph: BusBranchGraph, warm: StateVector | None = None, **kw) -> tuple[DecoupledSystem, PowerFlowResult]:
    ds = build_decoupled(graph)
    return ds, fdpf_solve(ds, warm, **kw)


def with_injections(graph: BusBranchGraph, scale: float) -> BusBranchGraph:
    """Copy with every bus injection scaled (load-level studies)."""
    buses = {b: dataclasses.replace(bus, p_inj=bus.p_inj * scale, q_inj=bus.q_inj * scale)
             for b, bus in graph.buses.items()}
    return graph.with_buses(buses)
