"""Weighted-least-squares state estimation with gain-matrix reuse.

Each snapshot iterates ``G dx = H^T R^-1 (z - h(x))``. The gain
``G = H^T R^-1 H`` is formed and factorized once, at the start state; when the
topology is unchanged since the previous snapshot the previous gain factors
are reused as they are and the iteration starts from the previous state.
"""

from __future__ import annotations

import time
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .factor_graph import (NumericFactors, SingularMatrixError, SparseSystem, factorize, order,
                           solve, symbolic_analyze)
from .grid_model import (BusBranchGraph, GridModelError, MeasurementDef, branch_terms,
                         build_admittance)
from .ntp import without_islands
from .powerflow import StateVector

TOL = 1e-6
MAX_ITER = 25
DEFAULT_SIGMA = {"V": 0.004, "PINJ": 0.01, "QINJ": 0.01, "PFLOW": 0.01, "QFLOW": 0.01}


class EstimationError(GridModelError):
    pass


@dataclass(frozen=True)
class Measurement:
    id: str
    kind: str
    z: float
    sigma: float
    bus: int | None = None
    branch: str | None = None
    end: str | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"measurement {self.id}: sigma must be positive")


def resolve_measurements(defs, graph: BusBranchGraph, sigma_defaults=None):
    """Map node-breaker measurement definitions onto the bus-branch graph.

    Returns ``(measurements, excluded_ids)``; definitions without a value or
    sitting on a de-energized bus / out-of-service branch are excluded.
    """
    sig = dict(DEFAULT_SIGMA, **(sigma_defaults or {}))
    out, excluded = [], []
    for m in (defs.values() if isinstance(defs, Mapping) else defs):
        if m.value is None:
            excluded.append(m.id)
            continue
        sigma = m.sigma if m.sigma is not None else sig[m.kind]
        if m.kind in ("PFLOW", "QFLOW"):
            br = graph.branches.get(m.location)
            if (br is None or not br.in_service or not graph.buses[br.from_bus].energized
                    or not graph.buses[br.to_bus].energized):
                excluded.append(m.id)
                continue
            out.append(Measurement(m.id, m.kind, m.value, sigma, branch=br.id, end=m.end))
        else:
            b = graph.bus_of_device.get(m.location)
            if b is None or not graph.buses[b].energized:
                excluded.append(m.id)
                continue
            out.append(Measurement(m.id, m.kind, m.value, sigma, bus=b))
    return out, excluded


class MeasurementModel:
    """Index structure tying a measurement list to the energized network.

    State layout: angles of non-slack buses, then magnitudes of all buses.
    """

    def __init__(self, graph: BusBranchGraph, meas: list[Measurement]):
        g = without_islands(graph)
        self.graph = g
        self.bus_ids = g.bus_ids
        n = self.n = self.bus_ids.size
        idx = g.index
        self.slack = np.array([idx[b] for b in g.slack_ids()], dtype=np.int64)
        self.nonslack = np.setdiff1d(np.arange(n, dtype=np.int64), self.slack)
        self.n_theta = self.nonslack.size
        self.n_state = self.n_theta + n
        self.ybus = build_admittance(g).matrix().tocsr()
        live = [br for br in g.branches.values() if br.in_service]
        self.branch_pos = {br.id: k for k, br in enumerate(live)}
        nb = len(live)
        f = np.array([idx[br.from_bus] for br in live], dtype=np.int64)
        t = np.array([idx[br.to_bus] for br in live], dtype=np.int64)
        terms = np.array([branch_terms(br) for br in live], dtype=complex).reshape(nb, 4)
        cf = sp.csr_matrix((np.ones(nb), (np.arange(nb), f)), shape=(nb, n))
        ct = sp.csr_matrix((np.ones(nb), (np.arange(nb), t)), shape=(nb, n))
        self.cf, self.ct = cf, ct
        self.yf = (sp.diags(terms[:, 0]) @ cf + sp.diags(terms[:, 1]) @ ct).tocsr()
        self.yt = (sp.diags(terms[:, 2]) @ cf + sp.diags(terms[:, 3]) @ ct).tocsr()

        self.meas = list(meas)
        self.ids = tuple(m.id for m in self.meas)
        self.z = np.array([m.z for m in self.meas])
        self.sigma = np.array([m.sigma for m in self.meas])
        self.w = 1.0 / self.sigma ** 2
        groups = {k: ([], []) for k in ("V", "PINJ", "QINJ", "PF_f", "PF_t", "QF_f", "QF_t")}
        for row, m in enumerate(self.meas):
            if m.kind in ("V", "PINJ", "QINJ"):
                if m.bus not in idx:
                    raise EstimationError(f"measurement {m.id} is on a de-energized bus")
                key, col = m.kind, idx[m.bus]
            else:
                if m.branch not in self.branch_pos:
                    raise EstimationError(f"measurement {m.id} is on an out-of-service branch")
                key = ("PF_" if m.kind == "PFLOW" else "QF_") + ("f" if m.end == "from" else "t")
                col = self.branch_pos[m.branch]
            groups[key][0].append(row)
            groups[key][1].append(col)
        self.groups = {k: (np.array(r, dtype=np.int64), np.array(c, dtype=np.int64))
                       for k, (r, c) in groups.items()}
        self._jacobian_structure(f, t, terms)

    def _jacobian_structure(self, f, t, terms):
        n = self.n
        y = self.ybus.tocoo()
        missing = np.setdiff1d(np.arange(n), y.row[y.row == y.col])
        r = np.concatenate([y.row, missing]).astype(np.int64)
        c = np.concatenate([y.col, missing]).astype(np.int64)
        yv = np.concatenate([y.data, np.zeros(missing.size, dtype=complex)])
        srt = np.lexsort((c, r))
        self._yr, self._yc, self._yv = r[srt], c[srt], yv[srt]
        self._ydiag = np.flatnonzero(self._yr == self._yc)
        ptr = np.searchsorted(self._yr, np.arange(n + 1))
        theta_col = np.full(n, -1, dtype=np.int64)
        theta_col[self.nonslack] = np.arange(self.n_theta)
        self._theta_col = theta_col
        self._f, self._t = f, t
        self._yff, self._yft, self._ytf, self._ytt = (terms[:, k] for k in range(4))

        def inj(key):
            rows, buses = self.groups[key]
            ent = [np.arange(ptr[b], ptr[b + 1]) for b in buses]
            cnt = np.array([e.size for e in ent], dtype=np.int64)
            ent = np.concatenate(ent) if ent else np.zeros(0, dtype=np.int64)
            return np.repeat(rows, cnt), ent

        self._inj = {k: inj(k) for k in ("PINJ", "QINJ")}

    def _assemble(self, parts):
        """COO pieces ``(rows, bus_cols, d_theta, d_vm)`` -> CSR Jacobian."""
        rows, cols, vals = [], [], []
        for r, bus, dth, dvm in parts:
            tc = self._theta_col[bus]
            keep = tc >= 0
            rows += [r[keep], r]
            cols += [tc[keep], self.n_theta + bus]
            vals += [dth[keep], dvm]
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(len(self.meas), self.n_state))

    def key(self) -> tuple:
        return (tuple(self.bus_ids.tolist()), tuple(self.slack.tolist()), self.ids)

    def state_to_x(self, state: StateVector) -> np.ndarray:
        s = state.aligned(self.bus_ids)
        return np.concatenate([s.theta[self.nonslack], s.v])

    def x_to_state(self, x: np.ndarray) -> StateVector:
        th = np.zeros(self.n)
        th[self.nonslack] = x[: self.n_theta]
        return StateVector(self.bus_ids.copy(), x[self.n_theta:].copy(), th)

    def flat_x(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.n_theta), np.ones(self.n)])

    def evaluate(self, x: np.ndarray, jacobian: bool = True):
        """``h(x)`` and (optionally) the sparse Jacobian ``H(x)``."""
        st = self.x_to_state(x)
        vm = st.v
        v = st.complex()
        vnorm = v / vm
        ibus = self.ybus @ v
        sbus = v * np.conj(ibus)
        i_f = self.yf @ v
        i_t = self.yt @ v
        sf = (self.cf @ v) * np.conj(i_f)
        s_t = (self.ct @ v) * np.conj(i_t)
        m = len(self.meas)
        h = np.zeros(m)
        g = self.groups
        h[g["V"][0]] = vm[g["V"][1]]
        h[g["PINJ"][0]] = sbus.real[g["PINJ"][1]]
        h[g["QINJ"][0]] = sbus.imag[g["QINJ"][1]]
        h[g["PF_f"][0]] = sf.real[g["PF_f"][1]]
        h[g["PF_t"][0]] = s_t.real[g["PF_t"][1]]
        h[g["QF_f"][0]] = sf.imag[g["QF_f"][1]]
        h[g["QF_t"][0]] = s_t.imag[g["QF_t"][1]]
        if not jacobian:
            return h, None

        # complex derivatives dS/dtheta and dS/d|V| on the Ybus entries
        yr, yc, yv = self._yr, self._yc, self._yv
        d = self._ydiag
        e_th = -1j * v[yr] * np.conj(yv * v[yc])
        e_th[d] += 1j * v * np.conj(ibus)
        e_vm = v[yr] * np.conj(yv * vnorm[yc])
        e_vm[d] += vnorm * np.conj(ibus)
        parts = []
        r, c = g["V"]
        parts.append((r, c, np.zeros(r.size), np.ones(r.size)))
        for key, take in (("PINJ", np.real), ("QINJ", np.imag)):
            r, ent = self._inj[key]
            parts.append((r, yc[ent], take(e_th[ent]), take(e_vm[ent])))
        f, t = self._f, self._t
        for end, a_, b_, y_ab, y_aa, i_a in (("f", f, t, self._yft, self._yff, i_f),
                                             ("t", t, f, self._ytf, self._ytt, i_t)):
            va, vb = v[a_], v[b_]
            dth_a = 1j * va * np.conj(y_ab * vb)
            dvm_a = vnorm[a_] * np.conj(i_a) + va * np.conj(y_aa * vnorm[a_])
            dvm_b = va * np.conj(y_ab * vnorm[b_])
            for kind, take in (("PF_", np.real), ("QF_", np.imag)):
                r, br = g[kind + end]
                parts.append((np.concatenate([r, r]), np.concatenate([a_[br], b_[br]]),
                              take(np.concatenate([dth_a[br], -dth_a[br]])),
                              take(np.concatenate([dvm_a[br], dvm_b[br]]))))
        return h, self._assemble(parts)


def evaluate_h(graph: BusBranchGraph, state: StateVector, meas: list[Measurement]):
    """Measurement functions and Jacobian at ``state`` (columns: non-slack angles, then magnitudes)."""
    model = MeasurementModel(graph, meas)
    return model.evaluate(model.state_to_x(state))


@dataclass(eq=False)
class GainBlock:
    system: SparseSystem
    factors: NumericFactors | None     # None for an empty block


@dataclass(eq=False)
class GainFactors:
    """Factorized angle and magnitude blocks of the gain, tagged with the model key."""

    key: tuple
    theta: GainBlock
    v: GainBlock

    @property
    def n(self) -> int:
        return self.theta.system.n + self.v.system.n

    @property
    def nnz(self) -> int:
        return self.theta.system.nnz + self.v.system.nnz


@dataclass(eq=False)
class EstimationResult:
    state: StateVector
    iterations: int
    converged: bool
    max_dx: float
    residuals: np.ndarray
    measurement_ids: tuple
    sigma: np.ndarray
    timings: dict
    gain: GainFactors
    reused_gain: bool
    gain_formulations: int
    factorizations: int
    excluded: list = field(default_factory=list)

    @property
    def stage_timings(self) -> dict:
        """Table-shaped timing rows (seconds); per-iteration rows are averages."""
        t = self.timings
        avg = lambda k: float(np.mean(t[k])) if t[k] else 0.0  # noqa: E731
        return {"Total": t["total"], "Gain Formulation": t["gain_formulation"],
                "Gain LU": t["gain_lu"], "Iterations": self.iterations,
                "RHS Update": avg("rhs_update"), "F/B Substitution": avg("fb_substitution"),
                "State Update": avg("state_update")}


def _form_gain(model: MeasurementModel, H):
    """Diagonal blocks (angles, magnitudes) of ``H^T R^-1 H``."""
    G = (H.T @ sp.diags(model.w) @ H).tocsr()
    nt = model.n_theta
    out = []
    for lo, hi in ((0, nt), (nt, model.n_state)):
        blk = G[lo:hi, lo:hi].tocoo()
        blk.sum_duplicates()
        out.append(SparseSystem(hi - lo, blk.row, blk.col, blk.data, symmetric=True))
    return out


def _factor_block(model, sys: SparseSystem, offset: int, workers) -> GainBlock:
    if sys.n == 0:
        return GainBlock(sys, None)
    try:
        return GainBlock(sys, factorize(sys, symbolic_analyze(sys, order(sys)), workers))
    except SingularMatrixError as exc:
        raise EstimationError(_unobservable(model, offset + exc.vertex)) from None


def estimate(graph: BusBranchGraph, meas: list[Measurement], warm: EstimationResult | None = None,
             topology_changed: bool = True, tol: float = TOL, max_iter: int = MAX_ITER,
             workers: int | None = None) -> EstimationResult:
    """WLS estimate for one snapshot.

    The gain is formed and factorized once, at the start state, and held
    constant. Each iteration is an angle half-step followed by a magnitude
    half-step, each solved against its diagonal gain block with a freshly
    evaluated right-hand side. With ``warm`` and ``topology_changed=False``
    the previous gain factors are reused and the previous state is the start
    point; otherwise the start is flat and a fresh gain is built.
    """
    t_start = time.perf_counter()
    model = MeasurementModel(graph, meas)
    timings = {"gain_formulation": 0.0, "gain_lu": 0.0, "rhs_update": [], "fb_substitution": [],
               "state_update": []}
    reuse = warm is not None and not topology_changed and warm.gain.key == model.key()
    formulations = factorizations = 0
    H = None
    if reuse:
        x = model.state_to_x(warm.state)
        gain = warm.gain
    else:
        x = model.flat_x()
        t0 = time.perf_counter()
        h, H = model.evaluate(x)
        g_theta, g_v = _form_gain(model, H)
        timings["gain_formulation"] = time.perf_counter() - t0
        formulations += 1
        t0 = time.perf_counter()
        gain = GainFactors(model.key(), _factor_block(model, g_theta, 0, workers),
                           _factor_block(model, g_v, model.n_theta, workers))
        timings["gain_lu"] = time.perf_counter() - t0
        factorizations += 1

    nt = model.n_theta
    halves = ((slice(0, nt), gain.theta), (slice(nt, model.n_state), gain.v))
    it = 0
    converged = False
    max_dx = float("inf")
    while it < max_iter:
        t_rhs = t_fb = t_up = 0.0
        max_dx = 0.0
        for part, block in halves:
            if block.factors is None:
                continue
            t0 = time.perf_counter()
            if H is None:
                h, H = model.evaluate(x)
            rhs = H[:, part].T @ (model.w * (model.z - h))
            t1 = time.perf_counter()
            dx = solve(block.factors, rhs)
            t2 = time.perf_counter()
            x[part] += dx
            max_dx = max(max_dx, float(np.abs(dx).max(initial=0.0)))
            H = None
            t3 = time.perf_counter()
            t_rhs += t1 - t0
            t_fb += t2 - t1
            t_up += t3 - t2
        timings["rhs_update"].append(t_rhs)
        timings["fb_substitution"].append(t_fb)
        timings["state_update"].append(t_up)
        it += 1
        if not np.isfinite(max_dx):
            break
        if max_dx < tol:
            converged = True
            break
    h, _ = model.evaluate(x, jacobian=False)
    timings["total"] = time.perf_counter() - t_start
    return EstimationResult(model.x_to_state(x), it, converged, max_dx, model.z - h, model.ids,
                            model.sigma, timings, gain, reuse, formulations, factorizations)


def _unobservable(model: MeasurementModel, col: int) -> str:
    if col < model.n_theta:
        pos = int(model.nonslack[col])
    else:
        pos = col - model.n_theta
    bus = int(model.bus_ids[pos])
    island = model.graph.buses[bus].island
    return f"gain matrix singular: island {island} is unobservable (at bus {bus})"


@dataclass
class ResidualReport:
    ids: tuple
    normalized: np.ndarray
    objective: float

    def largest(self) -> str:
        return self.ids[int(np.argmax(np.abs(self.normalized)))]


def residual_report(res: EstimationResult) -> ResidualReport:
    r = res.residuals / res.sigma
    return ResidualReport(res.measurement_ids, r, float(np.sum(r * r)))


def measurement_values(graph: BusBranchGraph, state: StateVector, defs) -> dict[str, float]:
    """Noise-free values of node-breaker measurement definitions at ``state``."""
    probe, _ = resolve_measurements(
        [MeasurementDef(m.id, m.kind, m.location, m.end, m.sigma, 0.0)
         for m in (defs.values() if isinstance(defs, Mapping) else defs)], graph)
    model = MeasurementModel(graph, probe)
    h, _ = model.evaluate(model.state_to_x(state), jacobian=False)
    return dict(zip(model.ids, h.tolist()))
