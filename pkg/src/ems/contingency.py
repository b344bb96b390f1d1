"""N-1 contingency analysis over the spatial evolving graph.

Each contingency is a small delta against the solved base case. With reuse
enabled a branch outage keeps the base B'/B'' sparsity pattern, subtracts the
branch's contribution from the values (entries that only the branch fed become
exact zeros), refactorizes numerically against the base symbolic structure and
warm-starts from the base state. With reuse disabled every case is built,
analyzed and solved from scratch.
"""

from __future__ import annotations

import dataclasses
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .factor_graph import SparseSystem, factorize, pcg_solve
from .grid_model import BusBranchGraph, branch_terms, finalize
from .powerflow import (DecoupledSystem, PowerFlowResult, StateVector, branch_flows,
                        build_decoupled, fdpf_solve)

RUNNABLE = "runnable"
ISLANDING = "islanding"
ISOLATION = "end-point isolation"
SCHEMES = ("fdpf", "pcg")
PCG_TOL = 1e-12


def _natural(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]


@dataclass(frozen=True, eq=False)
class ContingencyCase:
    id: str
    kind: str                      # "branch" | "generator"
    element: str | int             # branch id or bus id carrying the generator(s)
    status: str = RUNNABLE
    isolated: tuple = ()           # buses de-energized (isolation) or split off (islanding)
    graph: BusBranchGraph | None = None    # post-outage bus-branch graph
    delta: dict = field(default_factory=dict)

    @property
    def runnable(self) -> bool:
        return self.status == RUNNABLE


@dataclass(eq=False)
class BaseCase:
    """Solved base case: the shared, read-only artifacts every contingency reuses."""

    graph: BusBranchGraph
    system: DecoupledSystem
    result: PowerFlowResult
    symbolic_runs: int = 1

    @classmethod
    def solve(cls, graph: BusBranchGraph, warm: StateVector | None = None) -> "BaseCase":
        ds = build_decoupled(graph)
        ds.analyze().factorize()
        res = fdpf_solve(ds, warm)
        return cls(graph, ds, res)

    def __post_init__(self):
        ds = self.system
        self._bp_pos = _positions(ds.bp)
        self._bpp_pos = _positions(ds.bpp)
        n = ds.bus_ids.size
        self._row_p = np.full(n, -1, dtype=np.int64)
        self._row_p[ds.pvpq] = np.arange(ds.pvpq.size)
        self._row_pp = np.full(n, -1, dtype=np.int64)
        self._row_pp[ds.pq] = np.arange(ds.pq.size)


def _positions(sys: SparseSystem | None):
    if sys is None:
        return None
    keys = sys.keys
    srt = np.argsort(keys, kind="stable")
    return keys[srt], srt


def enumerate_cases(graph: BusBranchGraph, generators: bool = False) -> list[ContingencyCase]:
    """One case per in-service energized branch, optionally one per non-slack generator bus."""
    cases = []
    for br in sorted(graph.branches.values(), key=lambda b: _natural(b.id)):
        if (br.in_service and graph.buses[br.from_bus].energized
                and graph.buses[br.to_bus].energized):
            cases.append(ContingencyCase(br.id, "branch", br.id))
    if generators:
        for b in sorted(graph.buses):
            bus = graph.buses[b]
            if bus.energized and bus.n_gen and bus.type.value != "slack":
                cases.append(ContingencyCase(f"GEN{b}", "generator", b))
    return cases


def _generator_outage(graph: BusBranchGraph, bus_id: int) -> BusBranchGraph:
    bus = graph.buses[bus_id]
    buses = dict(graph.buses)
    buses[bus_id] = dataclasses.replace(
        bus, p_inj=bus.p_inj - bus.gen_p, q_inj=bus.q_inj - bus.gen_q, gen_p=0.0, gen_q=0.0,
        n_gen=0, v_set=None)
    return finalize(buses, graph.branches, graph.mva_base, graph.substation_buses,
                    graph.bus_of_device)


def screen(case: ContingencyCase, graph: BusBranchGraph) -> ContingencyCase:
    """Classify a case and attach its post-outage graph.

    Islanding: the outage leaves more energized islands than before. End-point
    isolation: it de-energizes buses (the split-off part has no source).
    """
    if case.kind == "generator":
        return dataclasses.replace(case, status=RUNNABLE,
                                   graph=_generator_outage(graph, case.element))
    post = graph.with_branch_status(case.element, False)
    lost = tuple(sorted(b for b, bus in post.buses.items()
                        if graph.buses[b].energized and not bus.energized))
    if lost:
        return dataclasses.replace(case, status=ISOLATION, isolated=lost, graph=post)
    before = {bus.island for bus in graph.buses.values() if bus.energized}
    after = {bus.island for bus in post.buses.values() if bus.energized}
    if len(after) > len(before):
        br = graph.branches[case.element]
        far = post.buses[br.to_bus].island
        split = tuple(sorted(b for b, bus in post.buses.items() if bus.island == far))
        return dataclasses.replace(case, status=ISLANDING, isolated=split, graph=post)
    return dataclasses.replace(case, status=RUNNABLE, graph=post)


def branch_delta(base: BaseCase, branch_id: str) -> dict:
    """Entries removed from Y, B' and B'' (bus-position coordinates) by a branch outage."""
    ds = base.system
    br = base.graph.branches[branch_id]
    idx = ds.graph.index
    f, t = idx[br.from_bus], idx[br.to_bus]
    yff, yft, ytf, ytt = branch_terms(br)
    rows = np.array([f, f, t, t], dtype=np.int64)
    cols = np.array([f, t, f, t], dtype=np.int64)
    dy = -np.array([yff, yft, ytf, ytt])
    w = 1.0 / br.x
    dbp = np.array([-w, w, w, -w])
    return {"rows": rows, "cols": cols, "y": dy, "bp": dbp, "bpp": -dy.imag}


def _apply(sys: SparseSystem, pos, rowmap, rows, cols, dvals) -> SparseSystem:
    r, c = rowmap[rows], rowmap[cols]
    keep = (r >= 0) & (c >= 0)
    keys = r[keep] * sys.n + c[keep]
    sorted_keys, order_ = pos
    at = np.searchsorted(sorted_keys, keys)
    if np.any(at >= sorted_keys.size) or np.any(sorted_keys[np.minimum(at, sorted_keys.size - 1)] != keys):
        raise ValueError("delta entry outside the base pattern")
    vals = sys.vals.copy()
    np.add.at(vals, order_[at], dvals[keep])
    return sys.with_values(vals)


@dataclass(eq=False)
class CaseResult:
    id: str
    status: str                    # screening status, or "converged" / "alert"
    half_iterations: int = 0
    pcg_iterations: int = 0
    state: StateVector | None = None
    violations: tuple = ()
    timings: dict = field(default_factory=dict)
    symbolic_runs: int = 0
    isolated: tuple = ()

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def violations(graph: BusBranchGraph, state: StateVector) -> tuple:
    """Sorted ``("flow", branch)`` and ``("voltage", bus)`` limit violations."""
    out = []
    for bid, (sf, st) in branch_flows(graph, state).items():
        rate = graph.branches[bid].rate
        if rate > 0 and max(abs(sf), abs(st)) > rate:
            out.append(("flow", bid))
    for b, v in zip(state.bus_ids.tolist(), state.v.tolist()):
        bus = graph.buses[b]
        if v < bus.vmin or v > bus.vmax:
            out.append(("voltage", str(b)))
    return tuple(sorted(out, key=lambda x: (x[0], _natural(x[1]))))


def _evolved_system(base: BaseCase, case: ContingencyCase) -> DecoupledSystem:
    """Case system on the base pattern: values minus the branch's contribution."""
    ds = base.system
    d = case.delta or branch_delta(base, case.element)
    n = ds.bus_ids.size
    ybus = (ds.ybus + sp.csr_matrix((d["y"], (d["rows"], d["cols"])), shape=(n, n))).tocsr()
    bp = None if ds.bp is None else _apply(ds.bp, base._bp_pos, base._row_p, d["rows"], d["cols"], d["bp"])
    bpp = None if ds.bpp is None else _apply(ds.bpp, base._bpp_pos, base._row_pp, d["rows"], d["cols"], d["bpp"])
    return dataclasses.replace(ds, graph=case.graph, ybus=ybus, bp=bp, bpp=bpp, fac_p=None,
                               fac_pp=None, timings={})


def _finish(case, res: PowerFlowResult, graph, timings, symbolic_runs, pcg_its=0) -> CaseResult:
    status = "converged" if res.converged else "alert"
    viol = violations(graph, res.state) if res.converged else ()
    return CaseResult(case.id, status, res.half_iterations, pcg_its, res.state, viol, timings,
                      symbolic_runs)


def solve_from_scratch(graph: BusBranchGraph, warm: StateVector | None = None):
    """Build, analyze, factorize and solve a network with no reuse. Returns ``(system, result)``."""
    ds = build_decoupled(graph)
    ds.analyze().factorize()
    return ds, fdpf_solve(ds, warm)


def run_case_fdpf(case: ContingencyCase, base: BaseCase, reuse: bool = True) -> CaseResult:
    if not case.runnable:
        return CaseResult(case.id, case.status, isolated=case.isolated)
    t0 = time.perf_counter()
    if not reuse or case.kind == "generator":
        ds, res = solve_from_scratch(case.graph, base.result.state if reuse else None)
        timings = dict(res.timings, total=time.perf_counter() - t0)
        return _finish(case, res, case.graph, timings, 1)
    ds = _evolved_system(base, case)
    t_init = time.perf_counter() - t0
    t1 = time.perf_counter()
    if ds.bp is not None:
        ds.fac_p = factorize(ds.bp, ds.sym_p)
    if ds.bpp is not None:
        ds.fac_pp = factorize(ds.bpp, ds.sym_pp)
    t_num = time.perf_counter() - t1
    res = fdpf_solve(ds, base.result.state)
    timings = {"initialization": t_init + res.timings["initialization"], "symbolic": 0.0,
               "numeric": t_num, "solve": res.timings["solve"]}
    timings["total"] = time.perf_counter() - t0
    return _finish(case, res, case.graph, timings, 0)


def run_case_pcg(case: ContingencyCase, base: BaseCase, precondition: bool = True,
                 tol: float = PCG_TOL) -> CaseResult:
    """Half-systems solved by CG, preconditioned with the base-case factors."""
    if not case.runnable:
        return CaseResult(case.id, case.status, isolated=case.isolated)
    if case.kind == "generator":
        raise ValueError("PCG scheme supports branch outages only")
    t0 = time.perf_counter()
    ds = _evolved_system(base, case)
    t_init = time.perf_counter() - t0
    systems = {"p": (ds.bp, base.system.fac_p), "q": (ds.bpp, base.system.fac_pp)}
    failed = []

    def lin(which, rhs):
        sys_, pre = systems[which]
        r = pcg_solve(sys_, rhs, pre if precondition else None, tol=tol)
        if not r.converged:
            failed.append(which)
        return r.x, r.iterations

    res = fdpf_solve(ds, base.result.state, linear_solver=lin)
    if failed:
        res.converged = False
    timings = {"initialization": t_init + res.timings["initialization"], "symbolic": 0.0,
               "numeric": 0.0, "solve": res.timings["solve"]}
    timings["total"] = time.perf_counter() - t0
    return _finish(case, res, case.graph, timings, 0, sum(res.solver_iterations))


@dataclass(eq=False)
class ContingencyReport:
    scheme: str
    reuse: bool
    cases: list[CaseResult]
    enumerated: int
    screened: int
    wall_time: float
    symbolic_runs: int
    base_violations: tuple = ()

    @property
    def run(self) -> int:
        return self.enumerated - self.screened

    @property
    def alerts(self) -> list[str]:
        return [c.id for c in self.cases if c.status == "alert"]

    def violation_sets(self) -> dict[str, tuple]:
        return {c.id: c.violations for c in self.cases}

    def summary(self) -> dict:
        return {"scheme": self.scheme, "reuse": self.reuse, "enumerated": self.enumerated,
                "run": self.run, "screened": self.screened, "alerts": len(self.alerts),
                "with_violations": sum(1 for c in self.cases if c.violations),
                "symbolic_runs": self.symbolic_runs, "wall_time_s": self.wall_time}


def run_all(graph: BusBranchGraph, base: BaseCase | None = None, scheme: str = "fdpf",
            jobs: int = 1, reuse: bool = True, generators: bool = False,
            warm: StateVector | None = None) -> ContingencyReport:
    """Enumerate, screen and solve every N-1 case; results come back in case order."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if scheme == "pcg" and not reuse:
        raise ValueError("the PCG scheme needs the base factors (reuse) as preconditioner")
    t0 = time.perf_counter()
    if base is None:
        base = BaseCase.solve(graph, warm)
    cases = [screen(c, graph) for c in enumerate_cases(graph, generators)]

    def one(case):
        if scheme == "pcg":
            return run_case_pcg(case, base)
        return run_case_fdpf(case, base, reuse)

    if jobs and jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, cases))
    else:
        results = [one(c) for c in cases]
    wall = time.perf_counter() - t0
    screened = sum(1 for c in cases if not c.runnable)
    base_viol = violations(base.graph, base.result.state) if base.result.converged else ()
    return ContingencyReport(scheme, reuse, results, len(cases), screened, wall,
                             base.symbolic_runs + sum(r.symbolic_runs for r in results), base_viol)
