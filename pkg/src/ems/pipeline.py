"""Snapshot pipeline: apply delta, topology processing, SE, PF, optional CA.

One snapshot is in flight at a time. The evolving sequence is only advanced
by a delta that applied cleanly; a failing analysis stage is recorded in the
snapshot report and the next snapshot rebuilds whatever that stage left stale.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cime_io.deltas import parse_delta_stream
from .cime_io.gride import GridFile, parse_grid
from .cime_io.replay import receive_replay
from .cime_io.results import CsvAppender, JsonlWriter
from .contingency import BaseCase, run_all
from .estimation import estimate, resolve_measurements, residual_report
from .grid_model import EvolvingSequence, GridModelError, SnapshotDelta, apply_delta
from .ntp import full_ntp, incremental_ntp, without_islands
from .powerflow import build_decoupled, fdpf_solve

log = logging.getLogger(__name__)

STAGES = ("ntp", "se", "pf", "ca")
SE_COLUMNS = ("Total", "Gain Formulation", "Gain LU", "Iterations", "RHS Update",
              "F/B Substitution", "State Update")
PF_COLUMNS = ("Initialization", "Symbolic Analysis", "Numerical Factorization", "Solve", "Total")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    grid: str | Path | GridFile
    deltas: str | Path | list | None = None
    endpoint: tuple | None = None
    stages: tuple = ("ntp", "se", "pf")
    se_tol: float = 1e-6
    se_max_iter: int = 25
    pf_tol: float = 1e-8
    warm: bool = True
    reuse: bool = True
    ca_scheme: str = "fdpf"
    jobs: int = 1
    workers: int | None = None
    out_dir: str | Path | None = None
    ntp_mode: str = "incremental"

    def __post_init__(self):
        if self.ntp_mode not in ("full", "incremental"):
            raise ConfigError(f"unknown ntp mode {self.ntp_mode!r}")
        self.stages = tuple(s for s in STAGES if s in set(self.stages))
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stages {sorted(unknown)}")
        if self.stages and "ntp" not in self.stages:
            raise ConfigError("downstream stages need the ntp stage")
        if self.deltas is not None and self.endpoint is not None:
            raise ConfigError("give either a delta file or a stream endpoint, not both")


@dataclass
class SnapshotReport:
    t: int
    topology_changed: bool = False
    stage_times: dict = field(default_factory=dict)      # seconds
    latency: float = 0.0
    errors: dict = field(default_factory=dict)
    ntp: dict | None = None
    se: dict | None = None
    pf: dict | None = None
    ca: dict | None = None
    se_timing: dict | None = None                        # milliseconds, SE_COLUMNS
    pf_timing: dict | None = None                        # milliseconds, PF_COLUMNS
    se_state: dict | None = None
    pf_state: dict | None = None
    ca_cases: list | None = None

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SnapshotReport":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def content(self) -> dict:
        """Report minus wall-clock fields, for determinism comparisons."""
        d = self.to_dict()
        for k in ("stage_times", "latency", "se_timing", "pf_timing"):
            d.pop(k)
        if d["ca"]:
            d["ca"] = {k: v for k, v in d["ca"].items() if k != "wall_time_s"}
        return d


def _state_dict(state) -> dict:
    return {"bus": state.bus_ids.tolist(), "v": state.v.tolist(), "theta": state.theta.tolist()}


def _structure(bb) -> tuple:
    """What downstream reuse depends on: bus membership and types, branch endpoints and status."""
    buses = tuple((b, bus.members, bus.type, bus.energized) for b, bus in bb.buses.items())
    branches = tuple((k, br.from_bus, br.to_bus, br.in_service) for k, br in sorted(bb.branches.items()))
    return buses, branches


def _ms(x: float) -> float:
    return 1e3 * x


class Pipeline:
    """Stateful per-snapshot processor over one evolving sequence."""

    def __init__(self, config: PipelineConfig, grid: GridFile, t0: int = 0):
        self.config = config
        self.seq = EvolvingSequence(grid.graph, grid.measurements, t0)
        self.bus_branch = None
        self.se_result = None
        self.pf_system = None
        self.pf_state = None

    def base(self, received: float | None = None) -> SnapshotReport:
        return self._process(self.seq.t, None, received)

    def step(self, delta: SnapshotDelta, received: float | None = None) -> SnapshotReport:
        received = time.perf_counter() if received is None else received
        try:
            cs = apply_delta(self.seq, delta)
        except GridModelError as exc:
            rep = SnapshotReport(delta.t, errors={"delta": str(exc)})
            rep.latency = time.perf_counter() - received
            return rep
        return self._process(delta.t, cs, received)

    def _process(self, t, changes, received) -> SnapshotReport:
        cfg = self.config
        received = time.perf_counter() if received is None else received
        rep = SnapshotReport(t)
        head = self.seq.head
        if "ntp" not in cfg.stages:
            rep.latency = time.perf_counter() - received
            return rep

        t0 = time.perf_counter()
        try:
            if self.bus_branch is None or changes is None:
                bb, topo, fallback = full_ntp(head.graph), True, False
            elif cfg.ntp_mode == "full":
                bb, fallback = full_ntp(head.graph), False
                topo = _structure(bb) != _structure(self.bus_branch)
            else:
                res = incremental_ntp(self.bus_branch, head.graph, changes, cfg.workers)
                bb, topo, fallback = res.graph, res.topology_changed, res.fallback
        except GridModelError as exc:
            rep.errors["ntp"] = str(exc)
            self.bus_branch = None
            rep.stage_times["ntp"] = time.perf_counter() - t0
            rep.latency = time.perf_counter() - received
            return rep
        rep.stage_times["ntp"] = time.perf_counter() - t0
        self.bus_branch = bb
        rep.topology_changed = bool(topo)
        energized = [b for b in bb.buses.values() if b.energized]
        rep.ntp = {"buses": len(bb.buses), "energized": len(energized),
                   "islands": len({b.island for b in energized}),
                   "branches_in_service": sum(1 for br in bb.branches.values() if br.in_service),
                   "fallback": fallback}
        self.seq.commit(t, bus_branch=bb, topology_changed=topo)

        start = None
        if "se" in cfg.stages:
            start = self._run_se(rep, bb, head, topo)
        if "pf" in cfg.stages:
            self._run_pf(rep, bb, topo, start)
        if "ca" in cfg.stages:
            self._run_ca(rep, bb)
        rep.latency = time.perf_counter() - received
        return rep

    def _run_se(self, rep, bb, head, topo):
        cfg = self.config
        t0 = time.perf_counter()
        try:
            meas, excluded = resolve_measurements(head.measurements, bb)
            warm = self.se_result if cfg.warm else None
            res = estimate(bb, meas, warm=warm, topology_changed=topo, tol=cfg.se_tol,
                           max_iter=cfg.se_max_iter, workers=cfg.workers)
        except (GridModelError, ValueError) as exc:
            rep.errors["se"] = str(exc)
            self.se_result = None
            rep.stage_times["se"] = time.perf_counter() - t0
            return None
        rep.stage_times["se"] = time.perf_counter() - t0
        self.se_result = res
        rr = residual_report(res)
        rep.se = {"iterations": res.iterations, "converged": res.converged,
                  "max_dx": res.max_dx, "reused_gain": res.reused_gain,
                  "gain_formulations": res.gain_formulations,
                  "factorizations": res.factorizations, "objective": rr.objective,
                  "measurements": len(meas), "excluded": len(excluded)}
        st = res.stage_timings
        rep.se_timing = {k: (st[k] if k == "Iterations" else _ms(st[k])) for k in SE_COLUMNS}
        rep.se_state = _state_dict(res.state)
        if not res.converged:
            rep.errors["se"] = f"not converged, final max |dx| = {res.max_dx:.3e}"
            return None
        self.seq.commit(rep.t, se=res)
        return res.state

    def _run_pf(self, rep, bb, topo, start):
        cfg = self.config
        t0 = time.perf_counter()
        try:
            if self.pf_system is not None and not topo and cfg.warm:
                ds = dataclasses.replace(self.pf_system, graph=without_islands(bb), timings={})
            else:
                ds = build_decoupled(bb)
            if start is None and cfg.warm:
                start = self.pf_state
            res = fdpf_solve(ds, start, tol=cfg.pf_tol)
        except (GridModelError, ValueError) as exc:
            rep.errors["pf"] = str(exc)
            self.pf_system = None
            rep.stage_times["pf"] = time.perf_counter() - t0
            return
        rep.stage_times["pf"] = time.perf_counter() - t0
        self.pf_system = ds
        tm = res.timings
        rep.pf_timing = {"Initialization": _ms(tm["initialization"]),
                         "Symbolic Analysis": _ms(tm["symbolic"]),
                         "Numerical Factorization": _ms(tm["numeric"]),
                         "Solve": _ms(tm["solve"]), "Total": _ms(tm["total"])}
        rep.pf = {"p_half": res.p_half, "q_half": res.q_half, "converged": res.converged,
                  "final_mismatch": res.mismatch_history[-1] if res.mismatch_history else 0.0,
                  "flagged_pv": res.flagged_pv, "reused_factors": ds.timings.get("build") is None}
        rep.pf_state = _state_dict(res.state)
        if res.converged:
            self.pf_state = res.state
            self.seq.commit(rep.t, pf=res)
        else:
            rep.errors["pf"] = f"not converged, final mismatch {rep.pf['final_mismatch']:.3e}"

    def _run_ca(self, rep, bb):
        cfg = self.config
        t0 = time.perf_counter()
        try:
            base = None
            if self.pf_system is not None and "pf" in cfg.stages and "pf" not in rep.errors:
                res = self.seq.artifacts.get(rep.t, {}).get("pf")
                if res is not None:
                    base = BaseCase(bb, self.pf_system, res)
            report = run_all(bb, base, scheme=cfg.ca_scheme, jobs=cfg.jobs, reuse=cfg.reuse)
        except (GridModelError, ValueError) as exc:
            rep.errors["ca"] = str(exc)
            rep.stage_times["ca"] = time.perf_counter() - t0
            return
        rep.stage_times["ca"] = time.perf_counter() - t0
        rep.ca = report.summary()
        rep.ca_cases = [case_row(c) for c in report.cases]


def case_row(c) -> dict:
    return {"case": c.id, "status": c.status, "half_iterations": c.half_iterations,
            "pcg_iterations": c.pcg_iterations,
            "violations": ";".join(f"{k}:{e}" for k, e in c.violations),
            "isolated": ";".join(map(str, c.isolated))}


def load_grid(source) -> GridFile:
    if isinstance(source, GridFile):
        return source
    return parse_grid(Path(source).read_bytes())


def load_deltas(source) -> list[SnapshotDelta]:
    if source is None:
        return []
    if isinstance(source, (list, tuple)):
        return list(source)
    return parse_delta_stream(Path(source).read_bytes())


def _stream(endpoint):
    """Deltas from a replay server, yielded with their receipt time."""
    q: queue.Queue = queue.Queue()
    done = object()
    failure = []

    def pump():
        try:
            receive_replay(endpoint, on_group=lambda d: q.put((d, time.perf_counter())))
        except (OSError, ValueError) as exc:
            failure.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=pump, name="replay-receiver", daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    if failure:
        raise failure[0]


def run_pipeline(config: PipelineConfig):
    """Yield one report for the base snapshot, then one per delta."""
    grid = load_grid(config.grid)
    pipe = Pipeline(config, grid)
    yield pipe.base()
    if config.endpoint is not None:
        for delta, received in _stream(config.endpoint):
            yield pipe.step(delta, received)
    else:
        for delta in load_deltas(config.deltas):
            yield pipe.step(delta)


SNAPSHOT_COLUMNS = ("t", "topology_changed", "ntp_ms", "se_ms", "pf_ms", "ca_ms", "latency_ms",
                    "se_iterations", "se_reused_gain", "pf_half_iterations", "ca_run",
                    "ca_screened", "errors")


class ReportSink:
    """Streams reports to ``snapshots.jsonl`` and the summary/timing CSVs in ``out_dir``."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.jsonl = JsonlWriter(self.out_dir / "snapshots.jsonl")
        self.summary = CsvAppender(self.out_dir / "snapshots.csv", SNAPSHOT_COLUMNS)
        self.se = CsvAppender(self.out_dir / "timing_se.csv", ("t", "topology_changed") + SE_COLUMNS)
        self.pf = CsvAppender(self.out_dir / "timing_pf.csv", ("t", "topology_changed") + PF_COLUMNS)
        self._ca = None

    def write(self, rep: SnapshotReport) -> None:
        self.jsonl.write(rep.to_dict())
        st = rep.stage_times

        def ms(k):
            return f"{_ms(st[k]):.4f}" if k in st else ""

        self.summary.write([
            rep.t, int(rep.topology_changed), ms("ntp"), ms("se"), ms("pf"), ms("ca"),
            f"{_ms(rep.latency):.4f}",
            rep.se["iterations"] if rep.se else "", int(rep.se["reused_gain"]) if rep.se else "",
            (rep.pf["p_half"] + rep.pf["q_half"]) if rep.pf else "",
            rep.ca["run"] if rep.ca else "", rep.ca["screened"] if rep.ca else "",
            "; ".join(f"{k}: {v}" for k, v in sorted(rep.errors.items()))])
        if rep.se_timing:
            self.se.write([rep.t, int(rep.topology_changed)] + [_fmt(rep.se_timing[k]) for k in SE_COLUMNS])
        if rep.pf_timing:
            self.pf.write([rep.t, int(rep.topology_changed)] + [_fmt(rep.pf_timing[k]) for k in PF_COLUMNS])
        if rep.ca_cases is not None:
            if self._ca is None:
                self._ca = CsvAppender(self.out_dir / "ca_cases.csv",
                                       ("t", "case", "status", "half_iterations", "pcg_iterations",
                                        "violations", "isolated"))
            for row in rep.ca_cases:
                self._ca.write([rep.t] + [row[k] for k in ("case", "status", "half_iterations",
                                                           "pcg_iterations", "violations",
                                                           "isolated")])

    def close(self) -> None:
        for w in (self.jsonl, self.summary, self.se, self.pf, self._ca):
            if w is not None:
                w.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.4f}"


def emit_reports(reports, out_dir) -> list[SnapshotReport]:
    """Write every report as it arrives; returns the reports."""
    out = []
    with ReportSink(out_dir) as sink:
        for rep in reports:
            sink.write(rep)
            out.append(rep)
    return out


def _quantiles(values) -> dict:
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return {"median": math.nan, "p95": math.nan, "n": 0}
    return {"median": float(np.median(a)), "p95": float(np.percentile(a, 95)), "n": int(a.size)}


def bench(config: PipelineConfig, repeats: int = 5, ca: bool = True) -> dict:
    """Median/p95 of per-stage and per-cycle times over ``repeats`` file-based runs.

    Also compares warm against cold SE iterations and, with ``ca``, the
    contingency wall time with structure reuse on against off.
    """
    if config.endpoint is not None:
        raise ConfigError("bench needs a file-based delta source")
    grid = load_grid(config.grid)
    deltas = load_deltas(config.deltas)
    stages = tuple(s for s in config.stages if s != "ca")
    per_stage = {s: [] for s in stages}
    cycle = []
    iters = {"warm": [], "cold": []}
    for r in range(repeats):
        for warm in (True, False):
            cfg = dataclasses.replace(config, grid=grid, deltas=deltas, stages=stages,
                                      warm=warm, endpoint=None)
            for rep in run_pipeline(cfg):
                if rep.se:
                    iters["warm" if warm else "cold"].append(rep.se["iterations"])
                if warm:
                    for s in stages:
                        if s in rep.stage_times:
                            per_stage[s].append(rep.stage_times[s])
                    cycle.append(sum(rep.stage_times.values()))
    out = {"repeats": repeats, "snapshots": len(deltas) + 1,
           "stage_seconds": {s: _quantiles(v) for s, v in per_stage.items()},
           "cycle_seconds": _quantiles(cycle),
           "se_iterations": {k: _quantiles(v) for k, v in iters.items()}}
    if ca:
        bb = full_ntp(grid.graph)
        on, off = [], []
        for _ in range(repeats):
            on.append(run_all(bb, scheme="fdpf", jobs=config.jobs, reuse=True).wall_time)
            off.append(run_all(bb, scheme="fdpf", jobs=config.jobs, reuse=False).wall_time)
        out["ca_seconds"] = {"reuse": _quantiles(on), "no_reuse": _quantiles(off),
                             "ratio": float(np.median(on) / np.median(off))}
    return out
