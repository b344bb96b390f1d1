"""Node-breaker and bus-branch graph models and the evolving snapshot sequence.

Everything is per-unit on the single MVA base declared by the grid file.
Timestamps are integer milliseconds.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from types import MappingProxyType
from typing import Mapping

import numpy as np
import scipy.sparse as sp


class GridModelError(ValueError):
    pass


class AdmittanceError(GridModelError):
    pass


class DeltaError(GridModelError):
    pass


class DeviceKind(str, Enum):
    BUSBAR = "busbar-section"
    BREAKER = "circuit-breaker"
    DISCONNECTOR = "disconnector"
    LOAD = "load"
    GENERATOR = "generator"
    WINDING = "transformer-winding"
    LINE_END = "line-terminal"
    SHUNT = "shunt"

    @property
    def is_switch(self) -> bool:
        return self in (DeviceKind.BREAKER, DeviceKind.DISCONNECTOR)

    @property
    def terminals(self) -> int:
        return 2 if self.is_switch else 1


class BusType(str, Enum):
    SLACK = "slack"
    PV = "PV"
    PQ = "PQ"


MEASUREMENT_KINDS = ("V", "PINJ", "QINJ", "PFLOW", "QFLOW")


@dataclass(frozen=True)
class Substation:
    id: str
    name: str


@dataclass(frozen=True)
class Device:
    """One piece of equipment. ``p``/``q`` are generation for generators and
    consumption for loads; ``b`` is the shunt susceptance of shunt devices."""

    id: str
    substation: str
    kind: DeviceKind
    p: float = 0.0
    q: float = 0.0
    vset: float | None = None
    slack: bool = False
    b: float = 0.0


@dataclass(frozen=True)
class Connection:
    device_a: str
    terminal_a: int
    device_b: str
    terminal_b: int


@dataclass(frozen=True)
class Link:
    """Line or two-winding transformer between two terminal devices."""

    id: str
    kind: str                 # "LINE" | "XFMR"
    from_device: str
    to_device: str
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    rate: float = 0.0         # MVA limit in per-unit, 0 = unlimited


@dataclass(frozen=True)
class MeasurementDef:
    id: str
    kind: str                 # one of MEASUREMENT_KINDS
    location: str             # device id (V, injections) or link id (flows)
    end: str | None = None    # "from" | "to" for flows
    sigma: float | None = None
    value: float | None = None


@dataclass(frozen=True, eq=False)
class NodeBreakerGraph:
    substations: Mapping[str, Substation]
    devices: Mapping[str, Device]
    connections: tuple[Connection, ...]
    links: Mapping[str, Link]
    status: Mapping[str, bool]            # switch id -> closed
    mva_base: float = 100.0
    vmin: float = 0.94
    vmax: float = 1.06

    @cached_property
    def registry(self) -> Mapping[str, int]:
        """Stable integer per device: busbar sections first, in file order, from 1."""
        bbs = [d for d, dev in self.devices.items() if dev.kind is DeviceKind.BUSBAR]
        rest = [d for d, dev in self.devices.items() if dev.kind is not DeviceKind.BUSBAR]
        return MappingProxyType({d: i for i, d in enumerate(bbs + rest, start=1)})

    @cached_property
    def devices_by_substation(self) -> Mapping[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {s: [] for s in self.substations}
        for d, dev in self.devices.items():
            out[dev.substation].append(d)
        return MappingProxyType({s: tuple(v) for s, v in out.items()})

    @cached_property
    def connections_by_substation(self) -> Mapping[str, tuple[Connection, ...]]:
        out: dict[str, list[Connection]] = {s: [] for s in self.substations}
        for c in self.connections:
            out[self.devices[c.device_a].substation].append(c)
        return MappingProxyType({s: tuple(v) for s, v in out.items()})

    @cached_property
    def links_by_substation(self) -> Mapping[str, tuple[str, ...]]:
        out: dict[str, set[str]] = {s: set() for s in self.substations}
        for lk in self.links.values():
            out[self.devices[lk.from_device].substation].add(lk.id)
            out[self.devices[lk.to_device].substation].add(lk.id)
        return MappingProxyType({s: tuple(sorted(v)) for s, v in out.items()})

    def validate(self) -> None:
        for d, dev in self.devices.items():
            if dev.substation not in self.substations:
                raise GridModelError(f"device {d} references unknown substation {dev.substation}")
            if dev.kind.is_switch and d not in self.status:
                raise GridModelError(f"switch {d} has no status")
        for s in self.status:
            if s not in self.devices or not self.devices[s].kind.is_switch:
                raise GridModelError(f"status given for non-switch {s}")
        for c in self.connections:
            for dev_id, term in ((c.device_a, c.terminal_a), (c.device_b, c.terminal_b)):
                dev = self.devices.get(dev_id)
                if dev is None:
                    raise GridModelError(f"connection references unknown device {dev_id}")
                if not 1 <= term <= dev.kind.terminals:
                    raise GridModelError(f"device {dev_id} has no terminal {term}")
            if self.devices[c.device_a].substation != self.devices[c.device_b].substation:
                raise GridModelError(
                    f"connection {c.device_a}-{c.device_b} crosses substations")
        for lk in self.links.values():
            want = DeviceKind.LINE_END if lk.kind == "LINE" else DeviceKind.WINDING
            for dev_id in (lk.from_device, lk.to_device):
                dev = self.devices.get(dev_id)
                if dev is None:
                    raise GridModelError(f"link {lk.id} references unknown device {dev_id}")
                if dev.kind is not want:
                    raise GridModelError(f"link {lk.id} end {dev_id} must be a {want.value}")
            if lk.kind == "LINE" and (self.devices[lk.from_device].substation
                                      == self.devices[lk.to_device].substation):
                raise GridModelError(f"line {lk.id} endpoints lie in one substation")

    def with_changes(self, status=None, devices=None) -> "NodeBreakerGraph":
        return dataclasses.replace(
            self,
            status=MappingProxyType(dict(status)) if status is not None else self.status,
            devices=MappingProxyType(dict(devices)) if devices is not None else self.devices)

    def total_injection(self) -> tuple[float, float]:
        p, q = [], []
        for dev in self.devices.values():
            if dev.kind is DeviceKind.GENERATOR:
                p.append(dev.p)
                q.append(dev.q)
            elif dev.kind is DeviceKind.LOAD:
                p.append(-dev.p)
                q.append(-dev.q)
        return math.fsum(p), math.fsum(q)


# ---------------------------------------------------------------- bus-branch


@dataclass(frozen=True)
class Bus:
    id: int
    type: BusType = BusType.PQ
    v: float = 1.0
    theta: float = 0.0
    p_inj: float = 0.0
    q_inj: float = 0.0
    b_shunt: float = 0.0
    members: tuple[str, ...] = ()
    substation: str = ""
    v_set: float | None = None
    gen_p: float = 0.0
    gen_q: float = 0.0
    n_gen: int = 0
    slack_pref: bool = False
    has_busbar: bool = True
    energized: bool = True
    island: int = 0
    vmin: float = 0.94
    vmax: float = 1.06

    @property
    def slack_candidate(self) -> bool:
        return self.has_busbar and (self.type is BusType.SLACK or self.slack_pref or self.gen_p > 0)


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    in_service: bool = True
    rate: float = 0.0
    kind: str = "LINE"


class UnionFind:
    def __init__(self, items=()):
        self.parent = {x: x for x in items}

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        p = self.parent
        root = x
        while p[root] != root:
            root = p[root]
        while p[x] != root:
            p[x], x = root, p[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def groups(self) -> dict:
        out: dict = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return out


@dataclass(frozen=True, eq=False)
class BusBranchGraph:
    """Admittance graph. ``buses`` is keyed and ordered by bus id.

    ``substation_buses``, ``bus_of_device`` and ``source`` (the node-breaker
    graph it was derived from) are only populated by topology processing.
    """

    buses: Mapping[int, Bus]
    branches: Mapping[str, Branch]
    mva_base: float = 100.0
    substation_buses: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    bus_of_device: Mapping[str, int] = field(default_factory=dict)
    source: NodeBreakerGraph | None = field(default=None, repr=False)

    def __post_init__(self):
        for br in self.branches.values():
            for b in (br.from_bus, br.to_bus):
                if b not in self.buses:
                    raise GridModelError(f"branch {br.id} endpoint {b} is not a bus")
            if br.in_service and br.from_bus == br.to_bus:
                raise GridModelError(f"branch {br.id} connects bus {br.from_bus} to itself")

    @cached_property
    def adjacency(self) -> Mapping[int, tuple[str, ...]]:
        adj: dict[int, list[str]] = {b: [] for b in self.buses}
        for br in self.branches.values():
            adj[br.from_bus].append(br.id)
            if br.to_bus != br.from_bus:
                adj[br.to_bus].append(br.id)
        return MappingProxyType({b: tuple(v) for b, v in adj.items()})

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array(list(self.buses), dtype=np.int64)

    @cached_property
    def index(self) -> Mapping[int, int]:
        return MappingProxyType({b: i for i, b in enumerate(self.buses)})

    def energized_ids(self) -> list[int]:
        return [b for b, bus in self.buses.items() if bus.energized]

    def slack_ids(self) -> list[int]:
        return [b for b, bus in self.buses.items() if bus.energized and bus.type is BusType.SLACK]

    def with_branch_status(self, branch_id: str, in_service: bool) -> "BusBranchGraph":
        """Copy with one branch switched; islands and bus types are re-derived."""
        branches = dict(self.branches)
        branches[branch_id] = dataclasses.replace(branches[branch_id], in_service=in_service)
        return finalize(self.buses, branches, self.mva_base, self.substation_buses,
                        self.bus_of_device)

    def with_buses(self, buses: Mapping[int, Bus]) -> "BusBranchGraph":
        return dataclasses.replace(self, buses=MappingProxyType(dict(buses)))

    def canonical(self) -> tuple:
        """Id-free form: buses ordered by member-device sets, branches by id."""
        members = {b: bus.members for b, bus in self.buses.items()}
        buses = sorted(
            (bus.members, bus.type.value, bus.energized, bus.p_inj, bus.q_inj, bus.b_shunt,
             bus.v_set, bus.has_busbar)
            for bus in self.buses.values())
        branches = tuple(
            (br.id, members[br.from_bus], members[br.to_bus], br.in_service, br.r, br.x, br.b,
             br.tap, br.rate)
            for br in sorted(self.branches.values(), key=lambda x: x.id))
        return tuple(buses), branches


def detect_islands(g: BusBranchGraph):
    """Connected components over in-service branches.

    Returns ``(labels, energized)``: bus id -> island number (islands numbered by
    their smallest bus id) and island number -> whether it has a slack candidate.
    """
    uf = UnionFind(g.buses)
    for br in g.branches.values():
        if br.in_service:
            uf.union(br.from_bus, br.to_bus)
    roots = sorted(uf.groups())
    number = {r: i for i, r in enumerate(roots)}
    labels = {b: number[uf.find(b)] for b in g.buses}
    energized = {i: False for i in number.values()}
    for b, bus in g.buses.items():
        if bus.slack_candidate:
            energized[labels[b]] = True
    return labels, energized


def finalize(buses: Mapping[int, Bus], branches: Mapping[str, Branch], mva_base: float = 100.0,
             substation_buses=None, bus_of_device=None, assign_types: bool = True) -> BusBranchGraph:
    """Label islands, pick one slack per energized island and assign bus types."""
    buses = dict(sorted(buses.items()))
    g = BusBranchGraph(MappingProxyType(buses), MappingProxyType(dict(branches)), mva_base,
                       MappingProxyType(dict(substation_buses or {})),
                       MappingProxyType(dict(bus_of_device or {})))
    labels, energized = detect_islands(g)
    slack: dict[int, int] = {}
    if assign_types:
        for island in set(labels.values()):
            if not energized[island]:
                continue
            cand = [bus for b, bus in buses.items() if labels[b] == island and bus.slack_candidate]
            pref = [bus for bus in cand if bus.slack_pref or bus.type is BusType.SLACK]
            pick = min(pref, key=lambda x: x.id) if pref else min(cand, key=lambda x: (-x.gen_p, x.id))
            slack[island] = pick.id
    out = {}
    for b, bus in buses.items():
        isl = labels[b]
        en = energized[isl]
        if assign_types:
            if en and slack.get(isl) == b:
                typ = BusType.SLACK
            elif en and bus.n_gen > 0 and bus.v_set is not None:
                typ = BusType.PV
            else:
                typ = BusType.PQ
        else:
            typ = bus.type
        v = bus.v_set if typ is not BusType.PQ and bus.v_set is not None else 1.0
        out[b] = dataclasses.replace(bus, type=typ, island=isl, energized=en,
                                     v=v if assign_types else bus.v)
    return dataclasses.replace(g, buses=MappingProxyType(out))


# ---------------------------------------------------------------- admittance


@dataclass(frozen=True, eq=False)
class Admittance:
    """Nodal admittance: ``diag`` per bus and four terms per in-service branch."""

    bus_ids: np.ndarray
    diag: np.ndarray
    branch_ids: tuple[str, ...]
    f: np.ndarray
    t: np.ndarray
    y_ff: np.ndarray
    y_ft: np.ndarray
    y_tf: np.ndarray
    y_tt: np.ndarray

    def matrix(self) -> sp.csr_matrix:
        n = self.bus_ids.size
        rows = np.concatenate([np.arange(n), self.f, self.t])
        cols = np.concatenate([np.arange(n), self.t, self.f])
        data = np.concatenate([self.diag, self.y_ft, self.y_tf])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def branch_terms(br: Branch):
    ys = 1.0 / complex(br.r, br.x)
    half = 0.5j * br.b
    t = br.tap
    return (ys + half) / (t * t), -ys / t, -ys / t, ys + half


def build_admittance(g: BusBranchGraph) -> Admittance:
    idx = g.index
    diag = np.array([1j * bus.b_shunt for bus in g.buses.values()], dtype=complex)
    ids, f, t, ff, ft, tf, tt = [], [], [], [], [], [], []
    for br in g.branches.values():
        if br.from_bus not in idx or br.to_bus not in idx:
            raise GridModelError(f"branch {br.id} has a dangling endpoint")
        if not br.in_service:
            continue
        if br.x == 0:
            raise AdmittanceError(f"branch {br.id} has zero reactance")
        a, b_, c, d = branch_terms(br)
        i, j = idx[br.from_bus], idx[br.to_bus]
        diag[i] += a
        diag[j] += d
        ids.append(br.id)
        f.append(i)
        t.append(j)
        ff.append(a)
        ft.append(b_)
        tf.append(c)
        tt.append(d)
    arr = lambda v, dt=complex: np.array(v, dtype=dt)  # noqa: E731
    return Admittance(g.bus_ids, diag, tuple(ids), arr(f, np.int64), arr(t, np.int64),
                      arr(ff), arr(ft), arr(tf), arr(tt))


# ---------------------------------------------------------------- evolving sequence


@dataclass(frozen=True)
class SnapshotDelta:
    t: int
    switches: Mapping[str, bool] = field(default_factory=dict)
    measurements: Mapping[str, float] = field(default_factory=dict)
    injections: Mapping[tuple[str, str], float] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not (self.switches or self.measurements or self.injections)


@dataclass(frozen=True)
class ChangeSet:
    substations: frozenset = frozenset()
    switches: tuple = ()
    injection_devices: frozenset = frozenset()
    measurements: frozenset = frozenset()

    def is_empty(self) -> bool:
        return not (self.substations or self.switches or self.injection_devices
                    or self.measurements)


@dataclass(frozen=True, eq=False)
class Snapshot:
    t: int
    graph: NodeBreakerGraph
    measurements: Mapping[str, MeasurementDef]


def check_delta(snap: Snapshot, d: SnapshotDelta) -> None:
    g = snap.graph
    if d.t < snap.t:
        raise DeltaError(f"delta timestamp {d.t} precedes head timestamp {snap.t}")
    for s in d.switches:
        dev = g.devices.get(s)
        if dev is None or not dev.kind.is_switch:
            raise DeltaError(f"unknown switch {s}")
    for m in d.measurements:
        if m not in snap.measurements:
            raise DeltaError(f"unknown measurement {m}")
    for (dev_id, comp) in d.injections:
        dev = g.devices.get(dev_id)
        if dev is None or dev.kind not in (DeviceKind.LOAD, DeviceKind.GENERATOR):
            raise DeltaError(f"unknown injection device {dev_id}")
        if comp not in ("P", "Q"):
            raise DeltaError(f"unknown injection component {comp!r} for {dev_id}")


def advance(snap: Snapshot, d: SnapshotDelta) -> tuple[Snapshot, ChangeSet]:
    """Pure application of one delta to a snapshot."""
    check_delta(snap, d)
    g = snap.graph
    changed = tuple(sorted(s for s, closed in d.switches.items() if g.status[s] != closed))
    status = None
    if changed:
        status = dict(g.status)
        status.update({s: d.switches[s] for s in changed})
    devices = None
    inj_devs = set()
    if d.injections:
        devices = dict(g.devices)
        for (dev_id, comp), val in d.injections.items():
            cur = devices[dev_id]
            new = dataclasses.replace(cur, **({"p": val} if comp == "P" else {"q": val}))
            if new != cur:
                devices[dev_id] = new
                inj_devs.add(dev_id)
    meas = snap.measurements
    meas_changed = set()
    if d.measurements:
        meas = dict(meas)
        for m, val in d.measurements.items():
            if meas[m].value != val:
                meas[m] = dataclasses.replace(meas[m], value=val)
                meas_changed.add(m)
        meas = MappingProxyType(meas)
    graph = g.with_changes(status=status, devices=devices) if (status or devices) else g
    cs = ChangeSet(
        substations=frozenset(g.devices[s].substation for s in changed),
        switches=changed,
        injection_devices=frozenset(inj_devs),
        measurements=frozenset(meas_changed))
    return Snapshot(d.t, graph, meas), cs


class EvolvingSequence:
    """Base snapshot, ordered deltas, and derived artifacts cached per timestamp.

    Single writer: only :func:`apply_delta` mutates the head. Artifacts
    committed for a timestamp are treated as immutable.
    """

    def __init__(self, graph: NodeBreakerGraph, measurements: Mapping[str, MeasurementDef] = None,
                 t0: int = 0):
        self.base = Snapshot(t0, graph, MappingProxyType(dict(measurements or {})))
        self.deltas: list[SnapshotDelta] = []
        self.head = self.base
        self.artifacts: dict[int, dict] = {}

    @property
    def t(self) -> int:
        return self.head.t

    def commit(self, t: int, **artifacts) -> None:
        self.artifacts.setdefault(t, {}).update(artifacts)

    def latest(self, name: str):
        for t in sorted(self.artifacts, reverse=True):
            if name in self.artifacts[t]:
                return self.artifacts[t][name]
        return None

    def replay(self, k: int | None = None) -> Snapshot:
        """Rebuild the snapshot after the first ``k`` deltas from the base."""
        snap = self.base
        for d in self.deltas[: len(self.deltas) if k is None else k]:
            snap, _ = advance(snap, d)
        return snap


def apply_delta(seq: EvolvingSequence, d: SnapshotDelta) -> ChangeSet:
    """Advance the head of ``seq`` by ``d``; on error the sequence is unchanged."""
    head, cs = advance(seq.head, d)
    seq.head = head
    seq.deltas.append(d)
    return cs


def snapshot_equal(a: Snapshot, b: Snapshot) -> bool:
    return (a.t == b.t and dict(a.graph.status) == dict(b.graph.status)
            and dict(a.graph.devices) == dict(b.graph.devices)
            and dict(a.measurements) == dict(b.measurements))
