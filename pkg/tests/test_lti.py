import numpy as np
import pytest
import sympy
from hypothesis import given, strategies as st

from encfir import benchmark
from encfir.lti import (
    DimensionError,
    IntegerStability,
    StateSpace,
    UnstableSystemError,
    explicit_output,
    hinf_norm,
    impulse_response,
    integer_schur_check,
    is_schur,
    markov_parameters,
    model_from_dict,
    model_to_dict,
    random_stable,
    save_model,
    load_model,
    simulate,
    spectral_radius,
)


def scalar(a, b, c, d, x0=0.0):
    return StateSpace([[a]], [[b]], [[c]], [[d]], [x0])


# -- simulate / explicit_output -------------------------------------------------------

def test_zero_system_outputs_zero(rng):
    sys = StateSpace(np.zeros((3, 3)), np.zeros((3, 2)), np.zeros((1, 3)), np.zeros((1, 2)))
    _, u = simulate(sys, rng.standard_normal((20, 2)))
    assert not u.samples.any()


def test_reactor_open_loop_diverges():
    x, _ = simulate(benchmark.reactor(), np.zeros((200, 1)))
    norms = np.linalg.norm(x.samples, axis=1)
    assert norms[-1] > 1e3 * norms[0]


def test_explicit_output_empty_sum():
    sys = StateSpace([[0.2, 0.1], [0.0, 0.5]], [[1.0], [2.0]], [[1.0, -1.0]], [[0.7]], [0.3, -0.4])
    y = np.array([[2.0], [1.0]])
    assert np.allclose(explicit_output(sys, y, 0), sys.c @ sys.x0 + sys.d @ y[0])


def test_explicit_output_hand_value():
    assert explicit_output(scalar(0.5, 1, 1, 0), np.ones(5), 2)[0] == pytest.approx(1.5)


def test_simulate_matches_explicit_on_random_systems(rng):
    worst = 0.0
    for _ in range(100):
        n, l, m = rng.integers(1, 5, size=3)
        sys = random_stable(rng, n, l, m).with_x0(rng.standard_normal(n))
        y = rng.standard_normal((100, l))
        _, u = simulate(sys, y)
        for k in range(100):
            worst = max(worst, np.max(np.abs(u.samples[k] - explicit_output(sys, y, k))))
    assert worst < 1e-9


def test_explicit_output_against_exact_rational_oracle():
    a = sympy.Matrix([[sympy.Rational(1, 2), sympy.Rational(1, 3)], [0, sympy.Rational(-1, 4)]])
    b = sympy.Matrix([[1], [sympy.Rational(2, 5)]])
    c = sympy.Matrix([[3, -1]])
    d = sympy.Matrix([[sympy.Rational(1, 7)]])
    x0 = sympy.Matrix([1, -2])
    ys = [sympy.Rational(v, 3) for v in (1, -2, 4, 0, 5, -1)]
    k = len(ys) - 1
    exact = c * a**k * x0 + d * ys[k]
    for j in range(k):
        exact += c * a**j * b * ys[k - 1 - j]
    sys = StateSpace(np.array(a, dtype=float), np.array(b, dtype=float), np.array(c, dtype=float),
                     np.array(d, dtype=float), np.array(x0, dtype=float).ravel())
    got = explicit_output(sys, np.array(ys, dtype=float), k)
    assert got[0] == pytest.approx(float(exact[0]), abs=1e-13)


def test_dimension_errors():
    with pytest.raises(DimensionError):
        StateSpace(np.eye(2), np.ones((3, 1)), np.ones((1, 2)), np.zeros((1, 1)))
    with pytest.raises(DimensionError):
        simulate(scalar(0.5, 1, 1, 0), np.ones((4, 2)))
    with pytest.raises(DimensionError):
        explicit_output(scalar(0.5, 1, 1, 0), np.ones(3), 3)


# -- spectral radius / Schur ------------------------------------------------------------

def test_spectral_radius_examples():
    assert spectral_radius(np.zeros((3, 3))) == 0.0
    assert is_schur(np.zeros((3, 3)))
    assert spectral_radius(benchmark.reactor().a) > 1
    assert not is_schur(benchmark.reactor().a)
    assert spectral_radius([[0.3, 5.0], [0.0, 0.9]]) == pytest.approx(0.9)


def test_is_schur_is_strict():
    assert not is_schur(np.eye(2))
    assert not is_schur([[1 - 1e-12]])
    assert is_schur([[0.999]])
    with pytest.raises(DimensionError):
        spectral_radius(np.ones((2, 3)))


def test_integer_schur_examples():
    shift = np.diag(np.ones(3, dtype=int), -1)
    assert integer_schur_check(shift) is IntegerStability.STABLE_NILPOTENT
    assert integer_schur_check(np.eye(3, dtype=int)) is IntegerStability.UNSTABLE
    with pytest.raises(ValueError):
        integer_schur_check([[0.5]])


@given(st.integers(1, 4).flatmap(
    lambda n: st.lists(st.integers(-2, 2), min_size=n * n, max_size=n * n).map(
        lambda v: np.array(v, dtype=int).reshape(n, n))))
def test_integer_schur_agrees_with_eigenvalues(a):
    nilpotent = integer_schur_check(a) is IntegerStability.STABLE_NILPOTENT
    # exact characteristic polynomial: nilpotent iff it is x**n
    x = sympy.Symbol("x")
    exact = sympy.Matrix(a.tolist()).charpoly(x).as_expr() == x ** a.shape[0]
    assert nilpotent == exact
    assert nilpotent == (spectral_radius(a) < 0.5)


# -- Markov parameters ------------------------------------------------------------------

def test_markov_examples():
    sys = scalar(0.5, 1, 1, 2)
    assert len(markov_parameters(sys, 0)) == 1
    vals = [float(p[0, 0]) for p in markov_parameters(sys, 2)]
    assert vals == [2.0, 1.0, 0.5]


@given(st.integers(0, 2**31 - 1), st.integers(0, 12))
def test_markov_equals_impulse_response(seed, count):
    rng = np.random.default_rng(seed)
    sys = random_stable(rng, int(rng.integers(1, 5)), int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    for p, h in zip(markov_parameters(sys, count), impulse_response(sys, count)):
        assert np.allclose(p, h, atol=1e-12)


# -- H-infinity norm ----------------------------------------------------------------------

def test_hinf_examples():
    zero = StateSpace(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((1, 2)), np.zeros((1, 1)))
    assert hinf_norm(zero) == 0.0
    d = np.array([[1.0, 2.0], [0.5, -1.0]])
    gain = StateSpace(np.zeros((1, 1)), np.zeros((1, 2)), np.zeros((2, 1)), d)
    assert hinf_norm(gain) == pytest.approx(np.linalg.svd(d, compute_uv=False)[0])
    assert hinf_norm(scalar(0.5, 1, 1, 0)) == pytest.approx(2.0, rel=1e-9)


def test_hinf_rejects_unstable_and_tiny_grid():
    with pytest.raises(UnstableSystemError):
        hinf_norm(scalar(1.5, 1, 1, 0))
    with pytest.raises(ValueError):
        hinf_norm(scalar(0.5, 1, 1, 0), grid_points=16)


def test_hinf_lower_bounds_scipy_dense_grid(rng):
    from scipy import signal
    sys = random_stable(rng, 4, 1, 1, radius=0.95)
    num, den = signal.ss2tf(sys.a, sys.b, sys.c, sys.d)
    _, h = signal.freqz(num[0], den, worN=200_000)
    ref = np.max(np.abs(h))
    val = hinf_norm(sys)
    assert val <= ref * (1 + 1e-9)
    assert val == pytest.approx(ref, rel=1e-6)


@given(st.integers(0, 2**31 - 1))
def test_hinf_monotone_in_grid(seed):
    rng = np.random.default_rng(seed)
    sys = random_stable(rng, int(rng.integers(1, 5)), 1, 2, radius=0.97)
    # nested grids: 64 -> 127 -> 253 -> 505 share every coarse point
    vals = [hinf_norm(sys, g) for g in (64, 127, 253, 505)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


# -- model files --------------------------------------------------------------------------

def test_model_roundtrip(tmp_path, rng):
    sys = random_stable(rng, 3, 2, 1).with_x0([1.0, 2.0, 3.0])
    save_model(sys, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    for name in ("a", "b", "c", "d", "x0"):
        assert np.array_equal(getattr(sys, name), getattr(back, name))
    assert model_from_dict(model_to_dict(sys)).dt == sys.dt
