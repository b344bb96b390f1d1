"""Small hand-built and randomly generated networks shared by the tests."""

from __future__ import annotations

import dataclasses
from types import MappingProxyType

import numpy as np

from ems.cases import node_breaker
from ems.estimation import measurement_values
from ems.grid_model import (Branch, Bus, Connection, Device, DeviceKind, Link, MeasurementDef,
                            NodeBreakerGraph, Substation, finalize)
from ems.ntp import full_ntp
from ems.powerflow import run_powerflow

GRID = """\
// two substations, one line
<Header>
@ key value
# version 1
# mva_base 100.0
</Header>
<Substation>
@ id name
# S1 "North yard"
# S2 -
</Substation>
<Device>
@ id substation kind p q vset slack
# BB1 S1 busbar-section - - - -
# BB2 S2 busbar-section - - - -
# G1 S1 generator 1.0 0.0 1.02 1
# LD2 S2 load 0.9 0.1 - -
# CB1 S1 circuit-breaker - - - -
# E1 S1 line-terminal - - - -
# E2 S2 line-terminal - - - -
</Device>
<Connection>
@ device_a terminal_a device_b terminal_b
# BB1 1 G1 1
# BB1 1 CB1 1
# CB1 2 E1 1
# BB2 1 E2 1
# BB2 1 LD2 1
</Connection>
<Link>
@ id kind from to r x b
# L1 LINE E1 E2 0.01 0.1 0.02
</Link>
<Status>
@ device status
# CB1 closed
</Status>
<Measurement>
@ id kind location end sigma value
# V1 V BB1 - 0.004 1.02
# P12 PFLOW L1 from - 0.9
</Measurement>
"""

DELTAS = """\
3 SWITCH CB1 open
3 MEAS V1 1.01
3 INJ LD2:P 0.95

7 SWITCH CB1 closed
"""


def test_delta_stream_groups_by_timestamp():
    ds = parse_delta_stream(DELTAS)
    assert [d.t for d in ds] == [3, 7]
    assert ds[0].switches == {"CB1": False} and ds[0].injections == {("LD2", "P"): 0.95}
    assert parse_delta_stream(serialize_deltas(ds)) == ds
    assert parse_delta_stream(DELTAS.encode().splitlines(keepends=True)) == ds


def synthetic_grid(n_subs: int = 20, seed: int = 0, p_open: float = 0.15):
    """Random node-breaker system: three busbar sections per substation, couplers
    between them, a load per substation, generators on every fourth, and a ring of
    lines plus random chords. Returns ``(graph, switch_ids)``."""
    rng = np.random.default_rng(seed)
    subs, devices, conns, status, links = {}, {}, [], {}, {}

    def add(dev, closed=True):
        devices[dev.id] = dev
        if dev.kind.is_switch:
            status[dev.id] = closed

    def hang(sub, bar, dev, tag):
        add(dev)
        add(Device(f"DS{tag}", sub, DeviceKind.DISCONNECTOR), rng.random() > p_open / 3)
        add(Device(f"CB{tag}", sub, DeviceKind.BREAKER), rng.random() > p_open)
        conns.extend([Connection(bar, 1, f"DS{tag}", 1), Connection(f"DS{tag}", 2, f"CB{tag}", 1),
                      Connection(f"CB{tag}", 2, dev.id, 1)])

    for k in range(1, n_subs + 1):
        s = f"S{k}"
        subs[s] = Substation(s, f"station {k}")
        for sec in "ABC":
            add(Device(f"BB{k}{sec}", s, DeviceKind.BUSBAR))
    for k in range(1, n_subs + 1):
        s = f"S{k}"
        for a, b in (("A", "B"), ("B", "C")):
            add(Device(f"CB{k}{a}{b}", s, DeviceKind.BREAKER), rng.random() > p_open)
            conns += [Connection(f"BB{k}{a}", 1, f"CB{k}{a}{b}", 1),
                      Connection(f"CB{k}{a}{b}", 2, f"BB{k}{b}", 1)]
        add(Device(f"DS{k}AC", s, DeviceKind.DISCONNECTOR), rng.random() < 0.5)
        conns += [Connection(f"BB{k}A", 1, f"DS{k}AC", 1), Connection(f"DS{k}AC", 2, f"BB{k}C", 1)]
        sec = "ABC"[rng.integers(3)]
        hang(s, f"BB{k}{sec}", Device(f"LD{k}", s, DeviceKind.LOAD, float(rng.uniform(0.1, 0.5)),
                                      float(rng.uniform(0.0, 0.2))), f"{k}L")
        if k == 1 or k % 4 == 0:
            sec = "ABC"[rng.integers(3)]
            hang(s, f"BB{k}{sec}", Device(f"GN{k}", s, DeviceKind.GENERATOR,
                                          float(rng.uniform(0.5, 1.5)), 0.0, vset=1.02,
                                          slack=k == 1), f"{k}G")
    pairs = [(k, k % n_subs + 1) for k in range(1, n_subs + 1)]
    for _ in range(n_subs // 2):
        a, b = rng.choice(np.arange(1, n_subs + 1), size=2, replace=False)
        pairs.append((int(a), int(b)))
    for n, (a, b) in enumerate(pairs, 1):
        ends = []
        for side, k in (("F", a), ("T", b)):
            s = f"S{k}"
            te = Device(f"TE{n}{side}", s, DeviceKind.LINE_END)
            hang(s, f"BB{k}{'ABC'[rng.integers(3)]}", te, f"{n}{side}")
            ends.append(te.id)
        links[f"L{n}"] = Link(f"L{n}", "LINE", ends[0], ends[1], 0.01, float(rng.uniform(0.05, 0.2)),
                              0.02)
    g = NodeBreakerGraph(MappingProxyType(subs), MappingProxyType(devices), tuple(conns),
                         MappingProxyType(links), MappingProxyType(status), 100.0)
    g.validate()
    switches = sorted(d for d, dev in devices.items() if dev.kind.is_switch)
    return g, switches


def small_measurements(g: NodeBreakerGraph) -> dict:
    out = {}
    for lid in sorted(g.links)[:3]:
        out[f"PF_{lid}"] = MeasurementDef(f"PF_{lid}", "PFLOW", lid, "from", 0.01, 0.1)
    out["V_S1"] = MeasurementDef("V_S1", "V", "BB1A", None, None, 1.01)
    return out


def bus_branch(edges, n=None, gens=(1,), x=0.1, r=0.0, b=0.0):
    """Bus-branch graph from an edge list; buses 1..n, generator (and slack) on ``gens``."""
    n = n or max(max(e) for e in edges)
    buses = {}
    for k in range(1, n + 1):
        g = k in gens
        buses[k] = Bus(id=k, p_inj=(0.5 if g and k != gens[0] else 0.0) - (0.0 if g else 0.2),
                       q_inj=0.0 if g else -0.05, v_set=1.0 if g else None,
                       gen_p=0.5 if g else 0.0, n_gen=1 if g else 0, slack_pref=k == gens[0],
                       substation=f"S{k}")
    branches = {f"E{i}": Branch(f"E{i}", a, c, r, x, b) for i, (a, c) in enumerate(edges, 1)}
    return finalize(buses, branches, 100.0)


def random_dd(rng, n, density=0.05, symmetric=True):
    """Random strictly diagonally dominant matrix; ``symmetric`` gives a symmetric pattern and values."""
    M = (rng.random((n, n)) < density) * rng.standard_normal((n, n))
    if symmetric:
        M = np.triu(M, 1)
        M = M + M.T
    np.fill_diagonal(M, 0.0)
    np.fill_diagonal(M, np.abs(M).sum(axis=1) + 1.0)
    return M


def solved(name):
    """Bus-branch model, measurement definitions valued at the power-flow solution, and that solution."""
    graph, defs = node_breaker(name)
    bb = full_ntp(graph)
    _, pf = run_powerflow(bb)
    vals = measurement_values(bb, pf.state, defs)
    defs = {k: dataclasses.replace(m, value=vals[k]) for k, m in defs.items()}
    return bb, defs, pf.state
