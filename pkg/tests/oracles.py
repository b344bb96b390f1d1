"""Independent reference computations used only by the tests.

Everything here is dense and deliberately naive; none of it calls into the
package's solvers.
"""

from __future__ import annotations

import itertools

import numpy as np


def dense_ybus(graph):
    """Loop over every bus pair and branch; returns (bus_ids, Y)."""
    ids = list(graph.buses)
    pos = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    Y = np.zeros((n, n), dtype=complex)
    for i, b in enumerate(ids):
        Y[i, i] += 1j * graph.buses[b].b_shunt
    for i, j in itertools.product(range(n), range(n)):
        for br in graph.branches.values():
            if not br.in_service:
                continue
            z = complex(br.r, br.x)
            ys = 1 / z
            f, t = pos[br.from_bus], pos[br.to_bus]
            if i == j == f:
                Y[i, i] += (ys + 1j * br.b / 2) / br.tap ** 2
            elif i == j == t:
                Y[i, i] += ys + 1j * br.b / 2
            elif (i, j) == (f, t) or (i, j) == (t, f):
                Y[i, j] += -ys / br.tap
    return ids, Y


def energized_view(graph):
    keep = [b for b, bus in graph.buses.items() if bus.energized]
    return keep


def newton_raphson(graph, tol=1e-12, max_iter=30):
    """Full polar Newton-Raphson on a dense Y over energized buses.

    Returns dict bus -> (V, theta) with slack angles 0.
    """
    ids_all, Yall = dense_ybus(graph)
    keep = [i for i, b in enumerate(ids_all) if graph.buses[b].energized]
    ids = [ids_all[i] for i in keep]
    Y = Yall[np.ix_(keep, keep)]
    buses = [graph.buses[b] for b in ids]
    n = len(ids)
    typ = [b.type.value for b in buses]
    pvpq = [i for i in range(n) if typ[i] != "slack"]
    pq = [i for i in range(n) if typ[i] == "PQ"]
    V = np.array([b.v_set if typ[i] != "PQ" else 1.0 for i, b in enumerate(buses)])
    th = np.zeros(n)
    S = np.array([complex(b.p_inj, b.q_inj) for b in buses])
    for _ in range(max_iter):
        Vc = V * np.exp(1j * th)
        I = Y @ Vc
        Sc = Vc * np.conj(I)
        mis = S - Sc
        F = np.concatenate([mis.real[pvpq], mis.imag[pq]])
        if np.abs(F).max(initial=0) < tol:
            break
        # dS/dth and dS/dV (standard complex derivative forms)
        dS_dth = 1j * np.diag(Vc) @ np.conj(np.diag(I) - Y @ np.diag(Vc))
        dS_dV = np.diag(Vc) @ np.conj(Y @ np.diag(np.exp(1j * th))) + np.diag(np.exp(1j * th)) @ np.conj(np.diag(I))
        J = np.block([
            [dS_dth.real[np.ix_(pvpq, pvpq)], dS_dV.real[np.ix_(pvpq, pq)]],
            [dS_dth.imag[np.ix_(pq, pvpq)], dS_dV.imag[np.ix_(pq, pq)]],
        ])
        dx = np.linalg.solve(J, F)
        th[pvpq] += dx[: len(pvpq)]
        V[pq] += dx[len(pvpq):]
    return {b: (V[i], th[i]) for i, b in enumerate(ids)}


def dense_lu_nopivot(A):
    A = np.array(A, dtype=float)
    n = A.shape[0]
    L = np.eye(n)
    U = A.copy()
    for k in range(n - 1):
        L[k + 1:, k] = U[k + 1:, k] / U[k, k]
        U[k + 1:, k:] -= np.outer(L[k + 1:, k], U[k, k:])
    return L, np.triu(U)


def symbolic_fill_count(pattern, perm):
    """Fill-ins from eliminating a boolean pattern in the given order (dense sim)."""
    P = np.array(pattern, dtype=bool)
    P = P | P.T
    P = P[np.ix_(perm, perm)].copy()
    n = P.shape[0]
    orig_lower = np.count_nonzero(np.tril(P, -1))
    for k in range(n):
        nz = [i for i in range(k + 1, n) if P[i, k]]
        for i in nz:
            for j in nz:
                P[i, j] = True
    return np.count_nonzero(np.tril(P, -1)) - orig_lower


def components(nodes, edges):
    """Connected components by repeated relaxation (no union-find)."""
    label = {v: v for v in nodes}
    changed = True
    while changed:
        changed = False
        for a, b in edges:
            m = min(label[a], label[b])
            if label[a] != m or label[b] != m:
                label[a] = label[b] = m
                changed = True
    groups = {}
    for v in nodes:
        groups.setdefault(label[v], set()).add(v)
    return sorted((frozenset(g) for g in groups.values()), key=min)


def brute_force_partition(graph, sub):
    """Bus partition of one substation from scratch: BFS over the closed-switch subgraph."""
    devs = [d for d, dev in graph.devices.items() if dev.substation == sub]
    nodes = [(d, t) for d in devs for t in range(1, graph.devices[d].kind.terminals + 1)]
    edges = [((c.device_a, c.terminal_a), (c.device_b, c.terminal_b)) for c in graph.connections
             if graph.devices[c.device_a].substation == sub]
    edges += [((d, 1), (d, 2)) for d in devs
              if graph.devices[d].kind.is_switch and graph.status[d]]
    comps = components(nodes, edges)
    out = set()
    for comp in comps:
        members = frozenset(d for d, _ in comp if not graph.devices[d].kind.is_switch)
        if members:
            out.add(members)
    return out


def minimum_degree(pattern):
    """Textbook minimum degree on a dense boolean graph, ties to the smallest index."""
    P = np.array(pattern, dtype=bool)
    P = P | P.T
    np.fill_diagonal(P, False)
    n = P.shape[0]
    alive = np.ones(n, dtype=bool)
    perm = []
    for _ in range(n):
        deg = np.where(alive, (P & alive).sum(axis=1), n + 1)
        v = int(np.argmin(deg))
        nb = np.flatnonzero(P[v] & alive)
        P[np.ix_(nb, nb)] = True
        P[nb, nb] = False
        alive[v] = False
        perm.append(v)
    return perm
