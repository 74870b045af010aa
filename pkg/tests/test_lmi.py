import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import solve_discrete_lyapunov

from encfir.lmi import solve_lmi, sym_basis, sym_from_vector


def lyapunov_lmi(a):
    """A'PA - P < 0 with P > 0, in the variables of a symmetric P."""
    n = a.shape[0]
    basis = sym_basis(n)
    f_basis = np.array([a.T @ b @ a - b for b in basis])
    return np.zeros((n, n)), f_basis, np.zeros((n, n)), basis


def test_sym_basis_roundtrip():
    p = np.array([[2.0, 1.0, 0.5], [1.0, 3.0, -1.0], [0.5, -1.0, 4.0]])
    v = p[np.triu_indices(3)]
    assert np.array_equal(sym_from_vector(v, 3), p)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.floats(0.1, 0.95))
def test_lyapunov_feasible_for_schur_matrices(seed, n, radius):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    a *= radius / max(np.max(np.abs(np.linalg.eigvals(a))), 1e-12)
    f0, fb, g0, gb = lyapunov_lmi(a)
    x0 = solve_discrete_lyapunov(a.T, np.eye(n))[np.triu_indices(n)]
    res = solve_lmi(f0, fb, g0, gb, x0=x0)
    assert res.feasible
    p = sym_from_vector(res.x, n)
    assert np.linalg.eigvalsh(p).min() > 0
    assert np.linalg.eigvalsh(a.T @ p @ a - p).max() < 0


def test_lyapunov_infeasible_for_unstable_matrix():
    a = np.diag([1.2, 0.5])
    f0, fb, g0, gb = lyapunov_lmi(a)
    res = solve_lmi(f0, fb, g0, gb, x0=np.array([1.0, 0.0, 1.0]))
    assert not res.feasible
    assert res.lower_bound >= -1e-8


def test_scalar_interval_constraint():
    # x - 1 < 0 and x > 3 is empty; x - 5 < 0 and x > 3 is not
    bad = solve_lmi(np.array([[-1.0]]), np.array([[[1.0]]]), np.array([[-3.0]]), np.array([[[1.0]]]),
                    x0=np.array([4.0]))
    assert not bad.feasible
    ok = solve_lmi(np.array([[-5.0]]), np.array([[[1.0]]]), np.array([[-3.0]]), np.array([[[1.0]]]),
                   x0=np.array([4.5]))
    assert ok.feasible and 3 < ok.x[0] < 5


def test_rejects_infeasible_start():
    with pytest.raises(ValueError):
        solve_lmi(np.array([[-1.0]]), np.array([[[1.0]]]), np.array([[-3.0]]), np.array([[[1.0]]]),
                  x0=np.array([0.0]))
