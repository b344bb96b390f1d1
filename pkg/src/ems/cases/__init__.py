"""Standard IEEE test cases (14, 30, 118 bus) and their node-breaker expansion.

Raw tables are stored in MW/MVAr as distributed; everything handed out is
per-unit on the case MVA base. Bus ids equal the IEEE bus numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from types import MappingProxyType

from ..grid_model import (Branch, Bus, BusBranchGraph, Connection, Device, DeviceKind, Link,
                          MeasurementDef, NodeBreakerGraph, Substation, finalize)

CASES = ("ieee14", "ieee30", "ieee118")


@dataclass(frozen=True)
class CaseData:
    name: str
    base_mva: float
    bus: tuple        # (number, type, pd, qd, bs)
    gen: tuple        # (bus, pg, qg, vset)
    branch: tuple     # (from, to, r, x, b, tap)

    @property
    def slack_bus(self) -> int:
        return next(int(b[0]) for b in self.bus if int(b[1]) == 3)


@lru_cache(maxsize=None)
def load_case(name: str) -> CaseData:
    if name not in CASES:
        raise KeyError(f"unknown case {name!r}; available: {', '.join(CASES)}")
    raw = json.loads(resources.files(__package__).joinpath("data", f"{name}.json").read_text())
    return CaseData(name, raw["base_mva"], tuple(map(tuple, raw["bus"])),
                    tuple(map(tuple, raw["gen"])), tuple(map(tuple, raw["branch"])))


def branch_id(k: int) -> str:
    """Id of the k-th (1-based) branch row of a case."""
    return f"BR{k}"


def case_graph(name: str, load_scale: float = 1.0) -> BusBranchGraph:
    """Bus-branch graph built directly from the case tables."""
    c = load_case(name)
    base = c.base_mva
    gens = {int(g[0]): g for g in c.gen}
    buses = {}
    for num, typ, pd, qd, bs in c.bus:
        num = int(num)
        g = gens.get(num)
        pg = g[1] / base if g else 0.0
        qg = g[2] / base if g else 0.0
        buses[num] = Bus(
            id=num, p_inj=pg - load_scale * pd / base, q_inj=qg - load_scale * qd / base,
            b_shunt=bs / base, substation=f"S{num}", v_set=g[3] if g else None,
            gen_p=pg, gen_q=qg, n_gen=1 if g else 0, slack_pref=int(typ) == 3)
    branches = {}
    for k, (f, t, r, x, b, tap) in enumerate(c.branch, 1):
        bid = branch_id(k)
        branches[bid] = Branch(bid, int(f), int(t), r, x, b, tap,
                               kind="XFMR" if tap != 1.0 else "LINE")
    return finalize(buses, branches, base)


def node_breaker(name: str, measurements: bool = True):
    """Expand a case into a node-breaker model.

    Every bus becomes a substation with two busbar sections joined by a
    coupler breaker. Loads and shunts hang off section A, the generator off
    section B, and branch ends alternate between the sections, each behind a
    disconnector and a breaker. Returns ``(graph, measurement_defs)``.
    """
    c = load_case(name)
    base = c.base_mva
    gens = {int(g[0]): g for g in c.gen}
    nums = [int(b[0]) for b in c.bus]
    subs = {f"S{k}": Substation(f"S{k}", f"bus{k}") for k in nums}
    devices: dict[str, Device] = {}
    conns: list[Connection] = []
    status: dict[str, bool] = {}

    def add(dev: Device):
        devices[dev.id] = dev
        if dev.kind.is_switch:
            status[dev.id] = True

    def hang(sub: str, bar: str, dev: Device, sw: str, with_disconnector=False):
        add(dev)
        add(Device(f"CB{sw}", sub, DeviceKind.BREAKER))
        if with_disconnector:
            add(Device(f"DS{sw}", sub, DeviceKind.DISCONNECTOR))
            conns.append(Connection(bar, 1, f"DS{sw}", 1))
            conns.append(Connection(f"DS{sw}", 2, f"CB{sw}", 1))
        else:
            conns.append(Connection(bar, 1, f"CB{sw}", 1))
        conns.append(Connection(f"CB{sw}", 2, dev.id, 1))

    for sec in ("A", "B"):
        for k in nums:
            add(Device(f"BB{k}{sec}", f"S{k}", DeviceKind.BUSBAR))
    for num, typ, pd, qd, bs in c.bus:
        k = int(num)
        sub = f"S{k}"
        add(Device(f"CB{k}C", sub, DeviceKind.BREAKER))
        conns.append(Connection(f"BB{k}A", 1, f"CB{k}C", 1))
        conns.append(Connection(f"CB{k}C", 2, f"BB{k}B", 1))
        if pd or qd:
            hang(sub, f"BB{k}A", Device(f"LD{k}", sub, DeviceKind.LOAD, pd / base, qd / base),
                 f"{k}L")
        if bs:
            hang(sub, f"BB{k}A", Device(f"SH{k}", sub, DeviceKind.SHUNT, b=bs / base), f"{k}S")
        g = gens.get(k)
        if g:
            hang(sub, f"BB{k}B", Device(f"GN{k}", sub, DeviceKind.GENERATOR, g[1] / base, g[2] / base,
                                        vset=g[3], slack=int(typ) == 3), f"{k}G",
                 with_disconnector=True)
    links = {}
    for n, (f, t, r, x, b, tap) in enumerate(c.branch, 1):
        kind = "XFMR" if tap != 1.0 else "LINE"
        end_kind = DeviceKind.WINDING if kind == "XFMR" else DeviceKind.LINE_END
        ends = []
        for side, bus in (("F", int(f)), ("T", int(t))):
            sub = f"S{bus}"
            dev = Device(f"TE{n}{side}", sub, end_kind)
            bar = f"BB{bus}{'A' if n % 2 else 'B'}"
            hang(sub, bar, dev, f"{n}{side}", with_disconnector=True)
            ends.append(dev.id)
        bid = branch_id(n)
        links[bid] = Link(bid, kind, ends[0], ends[1], r, x, b, tap)
    graph = NodeBreakerGraph(MappingProxyType(subs), MappingProxyType(devices), tuple(conns),
                             MappingProxyType(links), MappingProxyType(status), base)
    graph.validate()
    meas = full_measurement_plan(graph) if measurements else {}
    return graph, meas


def full_measurement_plan(graph: NodeBreakerGraph) -> dict[str, MeasurementDef]:
    """V and P/Q injection at every substation's section A, P/Q flow at both ends
    of every link. Values are left unset."""
    out: dict[str, MeasurementDef] = {}
    for sub in graph.substations:
        bar = f"BB{sub[1:]}A"
        if bar not in graph.devices:
            continue
        out[f"V_{sub}"] = MeasurementDef(f"V_{sub}", "V", bar)
        out[f"P_{sub}"] = MeasurementDef(f"P_{sub}", "PINJ", bar)
        out[f"Q_{sub}"] = MeasurementDef(f"Q_{sub}", "QINJ", bar)
    for lid in graph.links:
        for end in ("from", "to"):
            tag = "f" if end == "from" else "t"
            out[f"PF_{lid}{tag}"] = MeasurementDef(f"PF_{lid}{tag}", "PFLOW", lid, end)
            out[f"QF_{lid}{tag}"] = MeasurementDef(f"QF_{lid}{tag}", "QFLOW", lid, end)
    return out
