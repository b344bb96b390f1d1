import dataclasses

import numpy as np
import pytest

from ems.cases import case_graph
from ems.factor_graph import pcg_solve
from ems.grid_model import BusType, finalize
from ems.ntp import full_ntp
from ems.powerflow import (PowerFlowError, StateVector, branch_flows, build_decoupled,
                           compute_mismatch, fdpf_solve, run_powerflow, with_injections)
from fixtures import bus_branch, synthetic_grid
from oracles import newton_raphson


@pytest.mark.parametrize("name", ["ieee14", "ieee30"])
def test_matches_newton_raphson(ieee, name):
    g = ieee[name]
    _, res = run_powerflow(g)
    assert res.converged
    ref = newton_raphson(g)
    for b, v, th in zip(res.state.bus_ids, res.state.v, res.state.theta):
        assert v == pytest.approx(ref[int(b)][0], abs=1e-6)
        assert th == pytest.approx(ref[int(b)][1], abs=1e-6)


def test_converged_state_has_small_ac_mismatch(ieee):
    ds, res = run_powerflow(ieee["ieee118"])
    dp, dq = compute_mismatch(ds, res.state)
    assert np.abs(dp[ds.pvpq]).max() < 1e-8 and np.abs(dq[ds.pq]).max() < 1e-8
    dp2, _ = compute_mismatch(ieee["ieee118"], res.state)
    np.testing.assert_allclose(dp2, dp, atol=1e-12)


def test_flat_start_and_setpoints(ieee):
    g = ieee["ieee14"]
    ds, res = run_powerflow(g)
    for i in np.concatenate([ds.slack, ds.pv]):
        assert res.state.v[i] == g.buses[int(ds.bus_ids[i])].v_set
    assert res.state.theta[ds.slack].tolist() == [0.0]
    assert res.mismatch_history[0] > res.mismatch_history[-1]
    assert res.half_iterations == res.p_half + res.q_half > 0


def test_warm_start_from_solution_needs_no_iterations(ieee):
    ds, res = run_powerflow(ieee["ieee30"])
    again = fdpf_solve(ds, res.state)
    assert again.converged and again.half_iterations == 0
    assert again.timings["symbolic"] < res.timings["symbolic"] + 1e-3


def test_reused_system_factorizes_once(ieee):
    ds = build_decoupled(ieee["ieee118"])
    fdpf_solve(ds)
    fac = ds.fac_p
    fdpf_solve(ds)
    assert ds.fac_p is fac


def test_warm_start_tolerates_new_buses():
    g, _ = synthetic_grid(8, seed=5, p_open=0.0)
    bb = full_ntp(g)
    _, res = run_powerflow(bb)
    assert res.converged
    g2 = g.with_changes(status={**g.status, "CB3AB": False, "DS3AC": False})
    bb2 = full_ntp(g2)
    assert set(bb2.buses) - set(bb.buses)
    _, res2 = run_powerflow(bb2, warm=res.state)
    assert res2.converged


def test_branch_flows_balance_bus_injections(ieee):
    g = ieee["ieee30"]
    ds, res = run_powerflow(g)
    flows = branch_flows(g, res.state)
    inj = {int(b): 0j for b in res.state.bus_ids}
    for bid, (sf, st) in flows.items():
        br = g.branches[bid]
        inj[br.from_bus] += sf
        inj[br.to_bus] += st
    v = dict(zip(res.state.bus_ids.tolist(), res.state.complex()))
    for b, bus in g.buses.items():
        s_shunt = -1j * bus.b_shunt * abs(v[b]) ** 2
        sched = complex(bus.p_inj, bus.q_inj)
        if bus.type is BusType.PQ:
            assert inj[b] + s_shunt == pytest.approx(sched, abs=1e-7)
        elif bus.type is BusType.PV:
            assert (inj[b] + s_shunt).real == pytest.approx(bus.p_inj, abs=1e-7)
    losses = sum(sf + st for sf, st in flows.values())
    assert losses.real > 0


def test_taps_enter_b_double_prime_only(ieee):
    g = ieee["ieee14"]
    assert any(br.tap != 1.0 for br in g.branches.values())
    ds = build_decoupled(g)
    untapped = finalize(g.buses, {k: dataclasses.replace(b, tap=1.0) for k, b in g.branches.items()})
    ds2 = build_decoupled(untapped)
    assert np.array_equal(ds.bp.to_dense(), ds2.bp.to_dense())
    assert not np.allclose(ds.bpp.to_dense(), ds2.bpp.to_dense())


def test_overload_is_reported_not_raised(ieee):
    _, res = run_powerflow(with_injections(ieee["ieee14"], 8.0), max_half=30)
    assert not res.converged and res.half_iterations == 30


def test_light_load_converges_faster(ieee):
    light = run_powerflow(with_injections(ieee["ieee118"], 0.3))[1]
    heavy = run_powerflow(ieee["ieee118"])[1]
    assert light.converged and light.half_iterations <= heavy.half_iterations


def test_linear_solver_hook(ieee):
    ds = build_decoupled(ieee["ieee30"]).factorize()
    calls = []

    def cg(which, rhs):
        sys = ds.bp if which == "p" else ds.bpp
        r = pcg_solve(sys, rhs, None, tol=1e-13)
        calls.append(which)
        return r.x, r.iterations

    res = fdpf_solve(ds, linear_solver=cg)
    ref = fdpf_solve(ds)
    assert res.converged and calls[:2] == ["p", "q"]
    assert res.solver_iterations and all(i > 0 for i in res.solver_iterations)
    assert max(res.state.max_diff(ref.state)) < 1e-9


def test_every_island_needs_exactly_one_slack():
    g = bus_branch([(1, 2), (3, 4)], gens=(1,))
    assert not g.buses[3].energized
    ds = build_decoupled(g)
    assert set(ds.bus_ids.tolist()) == {1, 2}
    buses = dict(g.buses)
    buses[2] = dataclasses.replace(buses[2], type=BusType.SLACK)
    broken = g.with_buses(buses)
    with pytest.raises(PowerFlowError, match="slack buses"):
        build_decoupled(broken)
    dead = finalize({1: dataclasses.replace(g.buses[2])}, {})
    with pytest.raises(PowerFlowError, match="no energized buses"):
        build_decoupled(dead)


def test_state_vector_helpers():
    s = StateVector(np.array([3, 1, 2]), np.array([1.0, 0.9, 0.95]), np.array([0.1, 0.0, -0.1]))
    a = s.aligned([1, 2, 3])
    assert a.v.tolist() == [0.9, 0.95, 1.0]
    assert s.max_diff(a) == (0.0, 0.0)
    assert s.as_dict()[3] == (1.0, 0.1)


def test_case_graph_load_scale():
    g = case_graph("ieee14", load_scale=0.5)
    full = case_graph("ieee14")
    b = next(b for b, bus in full.buses.items() if bus.type is BusType.PQ and bus.p_inj)
    assert g.buses[b].p_inj == pytest.approx(0.5 * full.buses[b].p_inj)
