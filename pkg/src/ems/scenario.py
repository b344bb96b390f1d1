"""Scripted snapshot streams over the bundled IEEE cases.

Measurement values are computed from a power-flow solution of the current
network ("truth"), optionally with Gaussian noise. Each delta carries a small
load change plus a full measurement refresh; every ``switch_every``-th delta
also opens or re-closes a breaker, chosen so the network stays a single
energized island and the truth power flow still converges.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .cases import node_breaker
from .cime_io.gride import GridFile
from .estimation import measurement_values
from .grid_model import (DeviceKind, EvolvingSequence, NodeBreakerGraph, SnapshotDelta, advance,
                         Snapshot)
from .ntp import full_ntp
from .powerflow import run_powerflow


@dataclass
class Scenario:
    grid: GridFile
    deltas: list[SnapshotDelta]
    truth: list            # PF state per snapshot, base first


def _truth(graph: NodeBreakerGraph):
    bb = full_ntp(graph)
    _, res = run_powerflow(bb)
    return bb, res


def _valued(bb, state, defs, rng, noise):
    vals = measurement_values(bb, state, defs)
    out = {}
    for mid, v in vals.items():
        if noise:
            sigma = defs[mid].sigma if defs[mid].sigma is not None else (0.004 if defs[mid].kind == "V" else 0.01)
            v += noise * sigma * rng.standard_normal()
        out[mid] = v
    return out


def _topology_ok(bb) -> bool:
    islands = {b.island for b in bb.buses.values() if b.energized}
    return len(islands) == 1 and all(b.energized for b in bb.buses.values() if b.has_busbar)


def switch_candidates(graph: NodeBreakerGraph) -> list[str]:
    """Bus couplers and line-end breakers, in registry order."""
    return sorted((d for d, dev in graph.devices.items()
                   if dev.kind is DeviceKind.BREAKER and (d.endswith("C") or d.endswith("F"))),
                  key=graph.registry.__getitem__)


def build_scenario(name: str = "ieee118", n_deltas: int = 50, seed: int = 0,
                   switch_every: int = 5, load_step: float = 5e-4, noise: float = 0.0) -> Scenario:
    """Base grid file with measured values, plus ``n_deltas`` scripted deltas.

    ``load_step`` bounds the relative per-delta change of each perturbed load
    (default 0.05%); ``noise`` scales measurement noise in units of sigma.
    """
    rng = np.random.default_rng(seed)
    graph, defs = node_breaker(name)
    bb, res = _truth(graph)
    if not res.converged:
        raise RuntimeError(f"base power flow for {name} did not converge")
    values = _valued(bb, res.state, defs, rng, noise)
    defs = {k: dataclasses.replace(m, value=values.get(k)) for k, m in defs.items()}
    grid = GridFile(graph, defs, 1)
    seq = EvolvingSequence(graph, defs, 0)
    snap: Snapshot = seq.head
    truth = [res.state]
    candidates = switch_candidates(graph)
    opened: list[str] = []
    loads = sorted(d for d, dev in graph.devices.items() if dev.kind is DeviceKind.LOAD)
    deltas = []
    for k in range(1, n_deltas + 1):
        inj = {}
        for dev in rng.choice(loads, size=min(5, len(loads)), replace=False):
            d = snap.graph.devices[dev]
            scale = 1.0 + load_step * rng.uniform(-1.0, 1.0)
            inj[(str(dev), "P")] = d.p * scale
            inj[(str(dev), "Q")] = d.q * scale
        switches = {}
        if switch_every and k % switch_every == 0:
            if opened and (len(opened) >= 2 or rng.random() < 0.5):
                switches = {opened.pop(0): True}
            else:
                for sw in rng.permutation(candidates):
                    sw = str(sw)
                    if sw in opened:
                        continue
                    trial, _ = advance(snap, SnapshotDelta(k, {sw: False}, {}, inj))
                    tbb, tres = _truth(trial.graph)
                    if _topology_ok(tbb) and tres.converged:
                        switches = {sw: False}
                        opened.append(sw)
                        break
        step, _ = advance(snap, SnapshotDelta(k, switches, {}, inj))
        bb, res = _truth(step.graph)
        if not res.converged:
            raise RuntimeError(f"truth power flow diverged at delta {k}")
        meas = _valued(bb, res.state, step.measurements, rng, noise)
        delta = SnapshotDelta(k, switches, meas, inj)
        snap, _ = advance(snap, delta)
        deltas.append(delta)
        truth.append(res.state)
    return Scenario(grid, deltas, truth)
