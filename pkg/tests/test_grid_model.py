import dataclasses
from types import MappingProxyType

import numpy as np
import pytest

from ems.cases import case_graph, node_breaker
from ems.grid_model import (Branch, Bus, BusType, Connection, DeltaError, Device, DeviceKind,
                            EvolvingSequence, GridModelError, Link, SnapshotDelta, UnionFind,
                            advance, apply_delta, build_admittance, finalize, snapshot_equal)
from fixtures import bus_branch, small_measurements, synthetic_grid
from oracles import dense_ybus


def _replace(g, **kw):
    return dataclasses.replace(g, **{k: MappingProxyType(v) if isinstance(v, dict) else v
                                     for k, v in kw.items()})


@pytest.fixture(scope="module")
def grid():
    return synthetic_grid(6, seed=2)[0]


def test_union_find_groups():
    uf = UnionFind(range(6))
    uf.union(4, 2)
    uf.union(2, 0)
    uf.union(5, 3)
    assert sorted(sorted(g) for g in uf.groups().values()) == [[0, 2, 4], [1], [3, 5]]
    assert uf.find(4) == 0


def test_validate_rejects_dangling_references(grid):
    devices = dict(grid.devices)
    devices["X1"] = Device("X1", "S99", DeviceKind.LOAD)
    with pytest.raises(GridModelError, match="unknown substation S99"):
        _replace(grid, devices=devices).validate()

    status = dict(grid.status)
    del status["CB1AB"]
    with pytest.raises(GridModelError, match="switch CB1AB has no status"):
        _replace(grid, status=status).validate()

    conns = grid.connections + (Connection("BB1A", 1, "BB2A", 1),)
    with pytest.raises(GridModelError, match="crosses substations"):
        dataclasses.replace(grid, connections=conns).validate()

    links = dict(grid.links)
    lk = links["L1"]
    links["L1"] = dataclasses.replace(lk, to_device="BB2A")
    with pytest.raises(GridModelError, match="must be a line-terminal"):
        _replace(grid, links=links).validate()

    conns = grid.connections + (Connection("BB1A", 1, "CB1AB", 3),)
    with pytest.raises(GridModelError, match="no terminal 3"):
        dataclasses.replace(grid, connections=conns).validate()


def test_registry_puts_busbars_first(grid):
    reg = grid.registry
    bars = [d for d, dev in grid.devices.items() if dev.kind is DeviceKind.BUSBAR]
    assert sorted(reg[b] for b in bars) == list(range(1, len(bars) + 1))
    assert sorted(reg.values()) == list(range(1, len(grid.devices) + 1))


@pytest.mark.parametrize("name", ["ieee14", "ieee30", "ieee118"])
def test_admittance_matches_dense_oracle(name):
    g = case_graph(name)
    _, Y = dense_ybus(g)
    np.testing.assert_allclose(build_admittance(g).matrix().toarray(), Y, atol=1e-12)


def test_admittance_skips_out_of_service_and_rejects_zero_reactance():
    g = bus_branch([(1, 2), (2, 3), (3, 1)])
    off = g.with_branch_status("E2", False)
    Y = build_admittance(off).matrix().toarray()
    assert Y[1, 2] == 0 and Y[0, 1] != 0
    bad = finalize(g.buses, {**g.branches, "E1": dataclasses.replace(g.branches["E1"], x=0.0)})
    with pytest.raises(GridModelError, match="zero reactance"):
        build_admittance(bad)


def test_finalize_prefers_flagged_slack_then_largest_generation():
    buses = {1: Bus(1, gen_p=0.2, n_gen=1, v_set=1.0), 2: Bus(2, gen_p=0.9, n_gen=1, v_set=1.0),
             3: Bus(3), 4: Bus(4, gen_p=0.1, n_gen=1, v_set=1.0, slack_pref=True), 5: Bus(5)}
    branches = {"a": Branch("a", 1, 2, 0, 0.1), "b": Branch("b", 2, 3, 0, 0.1),
                "c": Branch("c", 4, 5, 0, 0.1)}
    g = finalize(buses, branches)
    assert g.buses[2].type is BusType.SLACK and g.buses[1].type is BusType.PV
    assert g.buses[4].type is BusType.SLACK
    assert g.buses[1].island == g.buses[3].island != g.buses[5].island
    dead = finalize({**buses, 6: Bus(6), 7: Bus(7)}, {**branches, "d": Branch("d", 6, 7, 0, 0.1)})
    assert not dead.buses[6].energized and not dead.buses[7].energized
    assert dead.slack_ids() == [2, 4]


def test_self_loop_branch_is_rejected():
    with pytest.raises(GridModelError, match="to itself"):
        finalize({1: Bus(1)}, {"a": Branch("a", 1, 1, 0, 0.1)})


def test_delta_validation_leaves_sequence_untouched(grid):
    seq = EvolvingSequence(grid, small_measurements(grid))
    head = seq.head
    for bad, msg in [
        (SnapshotDelta(1, {"NOPE": False}), "unknown switch"),
        (SnapshotDelta(1, {"BB1A": False}), "unknown switch"),
        (SnapshotDelta(1, measurements={"M?": 1.0}), "unknown measurement"),
        (SnapshotDelta(1, injections={("LD1", "X"): 1.0}), "unknown injection component"),
        (SnapshotDelta(1, injections={("BB1A", "P"): 1.0}), "unknown injection device"),
    ]:
        with pytest.raises(DeltaError, match=msg):
            apply_delta(seq, bad)
        assert seq.head is head and not seq.deltas
    apply_delta(seq, SnapshotDelta(5))
    with pytest.raises(DeltaError, match="precedes"):
        apply_delta(seq, SnapshotDelta(4))


def test_advance_is_pure_and_reports_real_changes(grid):
    seq = EvolvingSequence(grid, small_measurements(grid))
    sw = "CB2AB"
    before = dict(grid.status)
    snap, cs = advance(seq.head, SnapshotDelta(1, {sw: not grid.status[sw], "CB3AB": grid.status["CB3AB"]},
                                              {"V_S1": 1.0}, {("LD2", "P"): 0.7}))
    assert dict(grid.status) == before
    assert cs.switches == (sw,) and cs.substations == {"S2"}
    assert cs.injection_devices == {"LD2"} and cs.measurements == {"V_S1"}
    assert snap.graph.devices["LD2"].p == 0.7 and snap.measurements["V_S1"].value == 1.0


def test_replay_reconstructs_every_head(grid):
    rng = np.random.default_rng(0)
    switches = sorted(d for d, dev in grid.devices.items() if dev.kind.is_switch)
    seq = EvolvingSequence(grid, small_measurements(grid))
    heads = [seq.head]
    for t in range(1, 15):
        sw = switches[rng.integers(len(switches))]
        apply_delta(seq, SnapshotDelta(t, {sw: not seq.head.graph.status[sw]},
                                       injections={("LD1", "Q"): float(rng.random())}))
        heads.append(seq.head)
    for k, h in enumerate(heads):
        assert snapshot_equal(seq.replay(k), h)
    seq.commit(3, bus_branch="x")
    seq.commit(9, bus_branch="y", se="z")
    assert seq.latest("bus_branch") == "y" and seq.latest("pf") is None


def test_node_breaker_expansion_keeps_case_injections():
    g, defs = node_breaker("ieee30")
    p, q = g.total_injection()
    bb = case_graph("ieee30")
    assert p == pytest.approx(sum(b.p_inj for b in bb.buses.values()), abs=1e-12)
    assert q == pytest.approx(sum(b.q_inj for b in bb.buses.values()), abs=1e-12)
    assert {m.kind for m in defs.values()} == {"V", "PINJ", "QINJ", "PFLOW", "QFLOW"}


def test_link_kinds():
    g, _ = node_breaker("ieee14")
    kinds = {lk.kind for lk in g.links.values()}
    assert kinds == {"LINE", "XFMR"}
    assert all(isinstance(lk, Link) for lk in g.links.values())
