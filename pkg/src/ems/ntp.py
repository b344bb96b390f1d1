"""Network topology processing: node-breaker model to bus-branch model.

Buses never span substations here (switches and hard connections are
intra-substation; links carry impedance), so a bus partition can be rebuilt
one substation at a time. Incremental processing redoes only the substations
named in the change-set, re-links their branches, and re-derives islands.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from types import MappingProxyType

from .grid_model import (Branch, Bus, BusBranchGraph, BusType, ChangeSet, DeviceKind,
                         NodeBreakerGraph, detect_islands, finalize)

log = logging.getLogger(__name__)

__all__ = ["NTPResult", "full_ntp", "incremental_ntp", "detect_islands", "substation_partition"]


_SWITCH = frozenset(k for k in DeviceKind if k.is_switch)


@dataclass(frozen=True, eq=False)
class NTPResult:
    graph: BusBranchGraph
    topology_changed: bool
    fallback: bool = False
    rebuilt: frozenset = frozenset()


def substation_partition(g: NodeBreakerGraph, sub: str) -> list[tuple[str, ...]]:
    """Member-device groups (switches excluded) of one substation's buses."""
    devs = g.devices_by_substation[sub]
    devices, status = g.devices, g.status
    # one node per device; an open switch gets a second node for terminal 2
    node = {d: i for i, d in enumerate(devs)}
    parent = list(range(len(devs)))
    far = {}
    for d in devs:
        if devices[d].kind in _SWITCH and not status[d]:
            far[d] = len(parent)
            parent.append(len(parent))

    def find(x):
        while parent[x] != x:
            parent[x] = x = parent[parent[x]]
        return x

    for c in g.connections_by_substation[sub]:
        a = far[c.device_a] if c.terminal_a == 2 and c.device_a in far else node[c.device_a]
        b = far[c.device_b] if c.terminal_b == 2 and c.device_b in far else node[c.device_b]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict = {}
    for d in devs:
        if devices[d].kind not in _SWITCH:
            groups.setdefault(find(node[d]), []).append(d)
    reg = g.registry
    return sorted((tuple(sorted(m, key=reg.__getitem__)) for m in groups.values()),
                  key=lambda m: reg[m[0]])


def _make_bus(g: NodeBreakerGraph, members: tuple[str, ...]) -> Bus:
    reg = g.registry
    devs = [g.devices[m] for m in members]
    bars = [d for d in devs if d.kind is DeviceKind.BUSBAR]
    key = min(bars or devs, key=lambda d: reg[d.id])
    gens = sorted((d for d in devs if d.kind is DeviceKind.GENERATOR), key=lambda d: reg[d.id])
    loads = [d for d in devs if d.kind is DeviceKind.LOAD]
    vset = next((d.vset for d in gens if d.vset is not None), None)
    return Bus(
        id=reg[key.id],
        p_inj=math.fsum([d.p for d in gens] + [-d.p for d in loads]),
        q_inj=math.fsum([d.q for d in gens] + [-d.q for d in loads]),
        b_shunt=math.fsum(d.b for d in devs if d.kind is DeviceKind.SHUNT),
        members=tuple(sorted(members)),
        substation=key.substation,
        v_set=vset,
        gen_p=math.fsum(d.p for d in gens),
        gen_q=math.fsum(d.q for d in gens),
        n_gen=len(gens),
        slack_pref=any(d.slack for d in gens),
        has_busbar=bool(bars),
        vmin=g.vmin, vmax=g.vmax)


def _link_branch(g: NodeBreakerGraph, lid: str, bus_of: dict, buses: dict) -> Branch:
    lk = g.links[lid]
    f, t = bus_of[lk.from_device], bus_of[lk.to_device]
    live = buses[f].has_busbar and buses[t].has_busbar and f != t
    return Branch(lk.id, f, t, lk.r, lk.x, lk.b, lk.tap, live, lk.rate, lk.kind)


def _build(g: NodeBreakerGraph, sub_buses: dict, buses: dict, bus_of: dict, branches: dict):
    # a slack chosen for an earlier snapshot is not a preference; only device flags are
    buses = {b: dataclasses.replace(x, type=BusType.PQ) if x.type is BusType.SLACK else x
             for b, x in buses.items()}
    return dataclasses.replace(finalize(buses, branches, g.mva_base, sub_buses, bus_of), source=g)


def full_ntp(g: NodeBreakerGraph) -> BusBranchGraph:
    """Bus-branch model from scratch, substation by substation."""
    sub_buses, buses, bus_of = {}, {}, {}
    for sub in g.substations:
        ids = []
        for members in substation_partition(g, sub):
            bus = _make_bus(g, members)
            buses[bus.id] = bus
            ids.append(bus.id)
            for m in members:
                bus_of[m] = bus.id
        sub_buses[sub] = tuple(ids)
    branches = {lid: _link_branch(g, lid, bus_of, buses) for lid in g.links}
    return _build(g, sub_buses, buses, bus_of, branches)


def _consistent(prev: BusBranchGraph, g: NodeBreakerGraph, changed: ChangeSet) -> bool:
    if set(prev.substation_buses) != set(g.substations):
        return False
    if not changed.substations <= set(g.substations):
        return False
    for s in changed.switches:
        dev = g.devices.get(s)
        if dev is None or not dev.kind.is_switch or dev.substation not in changed.substations:
            return False
    if any(d not in prev.bus_of_device for d in changed.injection_devices):
        return False
    if len(prev.bus_of_device) != sum(1 for d in g.devices.values() if not d.kind.is_switch):
        return False
    src = prev.source
    if src is None:
        return True
    # anything that moved but is missing from the change-set makes it inconsistent
    listed = set(changed.switches)
    if any(g.status.get(s) != closed and s not in listed for s, closed in src.status.items()):
        return False
    return all(dev is src.devices.get(d) or dev == src.devices.get(d) or d in changed.injection_devices
               for d, dev in g.devices.items())


def incremental_ntp(prev: BusBranchGraph, g: NodeBreakerGraph, changed: ChangeSet,
                    workers: int | None = None) -> NTPResult:
    """Update ``prev`` for the switches and injections listed in ``changed``.

    Untouched substations keep their bus objects (and ids). The output is
    canonically equal to ``full_ntp(g)``. An inconsistent change-set falls back
    to a full rebuild with ``fallback=True``.
    """
    if not _consistent(prev, g, changed):
        log.warning("change-set inconsistent with previous model; running full NTP")
        return NTPResult(full_ntp(g), True, fallback=True, rebuilt=frozenset(g.substations))
    if changed.is_empty():
        return NTPResult(prev, False)

    subs = sorted(changed.substations)
    if workers and workers > 1 and len(subs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = dict(zip(subs, pool.map(lambda s: substation_partition(g, s), subs)))
    else:
        parts = {s: substation_partition(g, s) for s in subs}

    sub_buses = dict(prev.substation_buses)
    buses = dict(prev.buses)
    bus_of = dict(prev.bus_of_device)
    partition_changed = False
    for sub in subs:
        old = {buses[b].members for b in sub_buses[sub]}
        new = {tuple(sorted(m)) for m in parts[sub]}
        if old != new:
            partition_changed = True
        for b in sub_buses[sub]:
            del buses[b]
        ids = []
        for members in parts[sub]:
            bus = _make_bus(g, members)
            buses[bus.id] = bus
            ids.append(bus.id)
            for m in members:
                bus_of[m] = bus.id
        sub_buses[sub] = tuple(ids)

    # injection-only updates on buses outside the rebuilt substations
    for d in changed.injection_devices:
        b = bus_of[d]
        if buses[b].substation not in changed.substations:
            buses[b] = _make_bus(g, buses[b].members)

    branches = dict(prev.branches)
    relink = set()
    for sub in subs:
        relink.update(g.links_by_substation[sub])
    branch_changed = False
    for lid in sorted(relink):
        br = _link_branch(g, lid, bus_of, buses)
        old = prev.branches[lid]
        if (prev.buses[old.from_bus].members != buses[br.from_bus].members
                or prev.buses[old.to_bus].members != buses[br.to_bus].members
                or old.in_service != br.in_service):
            branch_changed = True
        branches[lid] = br

    # keep previous bus attributes where nothing changed, so ids/objects stay put
    graph = _build(g, sub_buses, buses, bus_of, branches)
    if not (partition_changed or branch_changed):
        same_types = all(
            graph.buses[b].type is prev.buses[b].type and graph.buses[b].energized == prev.buses[b].energized
            for b in graph.buses)
        topo = not same_types
    else:
        topo = True
    return NTPResult(graph, topo, rebuilt=frozenset(subs))


def full_result(g: NodeBreakerGraph) -> NTPResult:
    return NTPResult(full_ntp(g), True, rebuilt=frozenset(g.substations))


def without_islands(g: BusBranchGraph) -> BusBranchGraph:
    """Drop de-energized buses and their branches (analysis view)."""
    keep = {b: bus for b, bus in g.buses.items() if bus.energized}
    branches = {k: br for k, br in g.branches.items() if br.from_bus in keep and br.to_bus in keep}
    return dataclasses.replace(g, buses=MappingProxyType(keep), branches=MappingProxyType(branches))
