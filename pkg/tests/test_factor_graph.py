import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ems.factor_graph import (SingularMatrixError, SparseFormatError, SparseSystem, factorize,
                              natural, order, pcg_solve, read_coordinate, solve, symbolic_analyze,
                              write_coordinate)
from fixtures import random_dd
from oracles import dense_lu_nopivot, minimum_degree, symbolic_fill_count


def arrow(n, hub=0):
    M = np.eye(n) * n
    M[hub, :] = M[:, hub] = 1.0
    M[hub, hub] = n
    return M


def test_star_graph_eliminates_leaves_before_hub():
    sys = SparseSystem.from_dense(arrow(8, hub=0))
    perm = order(sys)
    assert 0 not in perm[:6].tolist()
    sym = symbolic_analyze(sys, perm)
    assert sym.fill_in == 0
    assert symbolic_analyze(sys, natural(8)).fill_in == 21


@given(st.integers(2, 30), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_ordering_matches_textbook_minimum_degree(n, seed):
    rng = np.random.default_rng(seed)
    M = random_dd(rng, n, density=rng.uniform(0.05, 0.5))
    sys = SparseSystem.from_dense(M)
    assert order(sys).tolist() == minimum_degree(M != 0)


@given(st.integers(2, 40), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_fill_count_matches_dense_simulation(n, seed):
    rng = np.random.default_rng(seed)
    M = random_dd(rng, n, density=0.15, symmetric=bool(seed % 2))
    sys = SparseSystem.from_dense(M)
    sym = symbolic_analyze(sys)
    assert sym.fill_in == symbolic_fill_count(M != 0, sym.perm)


def test_level_schedule_respects_elimination_tree():
    rng = np.random.default_rng(4)
    sym = symbolic_analyze(SparseSystem.from_dense(random_dd(rng, 80, 0.04)))
    for k, p in enumerate(sym.parent.tolist()):
        if p >= 0:
            assert p == sym.lrows[k].min()
            assert sym.level[p] > sym.level[k]
    seen = set()
    for lv in sym.levels:
        piv = set(lv.pivots.tolist())
        # every pivot's descendants were scheduled in earlier levels
        for k in piv:
            for c in sym.children()[k]:
                assert c in seen
        seen |= piv
    assert seen == set(range(80))


@pytest.mark.parametrize("symmetric", [True, False])
def test_factors_match_dense_oracle(symmetric):
    rng = np.random.default_rng(11)
    M = random_dd(rng, 60, 0.08, symmetric)
    sys = SparseSystem.from_dense(M)
    sym = symbolic_analyze(sys)
    fac = factorize(sys, sym)
    L, U = fac.dense_lu()
    Lo, Uo = dense_lu_nopivot(M[np.ix_(sym.perm, sym.perm)])
    np.testing.assert_allclose(L, Lo, atol=1e-12)
    np.testing.assert_allclose(U, Uo, atol=1e-12)
    b = rng.standard_normal(60)
    np.testing.assert_allclose(M @ solve(fac, b), b, atol=1e-10)


def test_threaded_factorization_is_bit_identical():
    rng = np.random.default_rng(5)
    sys = SparseSystem.from_dense(random_dd(rng, 150, 0.03))
    sym = symbolic_analyze(sys)
    assert np.array_equal(factorize(sys, sym).vals, factorize(sys, sym, workers=4).vals)


def test_numeric_refactorization_reuses_structure():
    rng = np.random.default_rng(6)
    M = random_dd(rng, 40, 0.1)
    sys = SparseSystem.from_dense(M)
    sym = symbolic_analyze(sys)
    M2 = M.copy()
    M2[M != 0] *= rng.uniform(0.5, 1.5, np.count_nonzero(M))
    M2 = (M2 + M2.T) / 2
    np.fill_diagonal(M2, np.abs(M2).sum(axis=1) + 1.0)
    fac = factorize(SparseSystem.from_dense(M2), sym)
    b = rng.standard_normal(40)
    np.testing.assert_allclose(M2 @ solve(fac, b), b, atol=1e-10)


def test_entry_outside_pattern_is_rejected():
    sys = SparseSystem.from_dense(np.diag([2.0, 3.0, 4.0]))
    sym = symbolic_analyze(sys)
    other = SparseSystem.from_dense(np.array([[2.0, 1.0, 0], [1.0, 3.0, 0], [0, 0, 4.0]]))
    with pytest.raises(ValueError, match="outside the analyzed pattern"):
        factorize(other, sym)


def test_zero_pivot_names_the_vertex():
    M = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 3.0]])
    sys = SparseSystem.from_dense(M)
    with pytest.raises(SingularMatrixError) as exc:
        factorize(sys, symbolic_analyze(sys, natural(3)))
    assert exc.value.vertex == 1


def test_constructor_validation():
    with pytest.raises(ValueError, match="duplicate"):
        SparseSystem(2, [0, 0], [1, 1], [1.0, 2.0])
    with pytest.raises(ValueError, match="out of range"):
        SparseSystem(2, [0, 2], [0, 0], [1.0, 2.0])
    with pytest.raises(ValueError):
        symbolic_analyze(SparseSystem.from_dense(np.eye(3)), [0, 0, 1])


def test_coordinate_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    sys = SparseSystem.from_dense(random_dd(rng, 12, 0.2, symmetric=False))
    path = tmp_path / "a.coo"
    write_coordinate(sys, path)
    back = read_coordinate(path)
    assert back.n == sys.n and back.symmetric == sys.symmetric
    assert np.array_equal(back.to_dense(), sys.to_dense())
    path.write_text("% n 2\n0 0 1.0\n1 x 2\n")
    with pytest.raises(SparseFormatError, match="line 3"):
        read_coordinate(path)


def test_pcg_with_exact_preconditioner_converges_in_one_step():
    rng = np.random.default_rng(8)
    sys = SparseSystem.from_dense(random_dd(rng, 50, 0.1))
    fac = factorize(sys, symbolic_analyze(sys))
    b = rng.standard_normal(50)
    r = pcg_solve(sys, b, fac, tol=1e-12)
    assert r.converged and r.iterations == 1
    plain = pcg_solve(sys, b, None, tol=1e-12)
    assert plain.converged and plain.iterations > 1
    np.testing.assert_allclose(plain.x, r.x, atol=1e-9)


def test_pcg_reports_non_convergence():
    rng = np.random.default_rng(9)
    sys = SparseSystem.from_dense(random_dd(rng, 50, 0.2))
    r = pcg_solve(sys, rng.standard_normal(50), None, tol=1e-14, max_iter=2)
    assert not r.converged and r.iterations == 2
    assert pcg_solve(sys, np.zeros(50)).iterations == 0
