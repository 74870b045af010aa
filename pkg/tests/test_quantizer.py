import math
from fractions import Fraction

import numpy as np
import pytest
import sympy
from hypothesis import assume, given, strategies as st

from encfir.lti import StateSpace, random_stable, simulate
from encfir.quantizer import (
    UNBOUNDED,
    QuantizationOverflow,
    RecoveryBound,
    ScalingProfile,
    ZqValue,
    overflow_horizon,
    quantize,
    quantize_array,
    recover,
    round_half_away,
    step_integer,
    to_integer_controller,
    zq_bounds,
    zq_wrap,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
scales = st.floats(1.0, 1e4, allow_nan=False)
moduli = st.integers(2, 2**70)


# -- rounding -------------------------------------------------------------------

def test_quantize_examples():
    assert quantize(0.516, 100) == 52
    assert quantize(0.0, 37.5) == 0
    assert quantize(-0.005, 100) == -1
    assert quantize(0.005, 100) == 1
    assert quantize(-2.5, 1) == -3


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize(float("nan"), 10)
    with pytest.raises(ValueError):
        quantize(1.0, 0.5)


@given(finite, scales)
def test_quantize_error_bound(x, s):
    z = quantize(x, s)
    # exact rational check of |x - z/s| <= 1/(2s)
    assert abs(Fraction(x) - Fraction(z) / Fraction(s)) <= 1 / (2 * Fraction(s))


@given(finite, scales)
def test_quantize_matches_exact_rounding(x, s):
    exact = sympy.Rational(Fraction(s)) * sympy.Rational(Fraction(x))
    ref = int(sympy.sign(exact) * sympy.floor(abs(exact) + sympy.Rational(1, 2)))
    assert quantize(x, s) == ref


@given(finite, scales)
def test_quantize_is_odd(x, s):
    assert quantize(-x, s) == -quantize(x, s)


def test_quantize_grid_exhaustive():
    for s in (1, 3, 10, 100, 256):
        for x in np.linspace(-5, 5, 2001):
            z = quantize(x, s)
            assert abs(Fraction(float(x)) - Fraction(z, 1) / s) <= Fraction(1, 2 * s)


def test_round_half_away_fraction():
    assert round_half_away(Fraction(5, 2)) == 3
    assert round_half_away(Fraction(-5, 2)) == -3
    assert round_half_away(Fraction(7, 3)) == 2


def test_quantize_array_object_ints():
    out = quantize_array(np.array([[0.25, -1.5]]), 2)
    assert out.dtype == object and out.tolist() == [[1, -3]]


# -- Z_q ------------------------------------------------------------------------

def test_zq_examples():
    assert zq_wrap(16, 16) == 0
    assert zq_wrap(8, 16) == -8
    assert zq_bounds(16) == (-8, 7)
    assert zq_bounds(15) == (-7, 7)


@given(st.integers(-2**80, 2**80), moduli)
def test_zq_wrap_representative(x, q):
    r = zq_wrap(x, q)
    lo, hi = zq_bounds(q)
    assert lo <= r <= hi
    assert (x - r) % q == 0


@given(st.integers(-2**80, 2**80), st.integers(-2**80, 2**80), st.integers(-2**80, 2**80), moduli)
def test_zq_ring_laws(a, b, c, q):
    A, B, C = ZqValue.of(a, q), ZqValue.of(b, q), ZqValue.of(c, q)
    assert (A + B) + C == A + (B + C)
    assert A + B == B + A
    assert (A * B) * C == A * (B * C)
    assert A * B == B * A
    assert A * (B + C) == A * B + A * C
    assert int(A + B) == zq_wrap(a + b, q)
    assert int(A * B) == zq_wrap(a * b, q)
    assert int(A - B) == zq_wrap(a - b, q)
    assert int(-A) == zq_wrap(-a, q)


def test_zqvalue_checks_range():
    with pytest.raises(ValueError):
        ZqValue(8, 16)
    with pytest.raises(ValueError):
        ZqValue.of(1, 16) + ZqValue.of(1, 17)


# -- scaling profile --------------------------------------------------------------

def test_profile_simple_choice_accepted():
    p = ScalingProfile.uniform(100.0, 2**32)
    assert p.s5 == 1.0 and p.s0 == p.s4 == 100.0
    assert ScalingProfile.from_dict(p.to_dict()) == p


@given(st.floats(1, 1e3), st.floats(1, 1e3), st.floats(1, 1e3), st.floats(1, 1e3))
def test_profile_constraint_violations_rejected(s0, s2, s5, s1):
    assume(not math.isclose(s0, s2 * s5, rel_tol=1e-12))
    with pytest.raises(ValueError):
        ScalingProfile(s0, s1, s2, 1.0, s2 / s1 if s2 >= s1 else 1.0, s5, q=2**20)


def test_profile_second_constraint_rejected():
    with pytest.raises(ValueError):
        ScalingProfile(10, 10, 10, 10, 20, 1, q=2**20)
    with pytest.raises(ValueError):
        ScalingProfile.uniform(0.5, 2**20)
    with pytest.raises(ValueError):
        ScalingProfile.uniform(10, 1)


# -- integer controller -----------------------------------------------------------

def test_zero_system_integer_controller():
    sys = StateSpace(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((1, 2)), np.zeros((1, 1)))
    # s1 = 1 so the prescaled input does not accumulate a growing scale
    ctrl = to_integer_controller(sys, ScalingProfile.integer_dynamics(100, 2**20))
    assert not any(ctrl.a_bar.flat) and not any(ctrl.d_bar.flat)
    for y in (1.0, -3.0, 7.5, 40.0):
        v, ov = step_integer(ctrl, [y])
        assert v.tolist() == [0] and not ov


def test_construction_overflow():
    sys = StateSpace([[0.5]], [[1000.0]], [[1.0]], [[0.0]])
    with pytest.raises(QuantizationOverflow):
        to_integer_controller(sys, ScalingProfile.uniform(100, 2**10))


def test_recovered_matrices_close(rng):
    sys = random_stable(rng, 4, 2, 2)
    ctrl = to_integer_controller(sys, ScalingProfile.uniform(1000, 2**40))
    for bar, m in ((ctrl.a_bar, sys.a), (ctrl.b_bar, sys.b), (ctrl.c_bar, sys.c), (ctrl.d_bar, sys.d)):
        assert np.all(np.abs(bar.astype(float) / 1000 - m) <= 0.5 / 1000 + 1e-15)


def _oracle_overflow_step(a, b, c, s, q, y, steps):
    """Big-integer oracle for a scalar controller with s0..s4 = s, s5 = 1."""
    abar, bbar, cbar = round(a * s), round(b * s), round(c * s)
    lo, hi = -(q // 2), (q + 1) // 2 - 1
    z = 0
    for k in range(steps):
        yq = round_half_away(Fraction(s) ** (k + 1) * Fraction(y))
        v = cbar * z
        z_next = abar * z + bbar * yq
        if not all(lo <= w <= hi for w in (yq, v, z_next)):
            return k
        z = z_next
    return None


def test_scalar_overflow_flag_matches_oracle():
    sys = StateSpace([[0.9]], [[1.0]], [[1.0]], [[0.0]])
    ctrl = to_integer_controller(sys, ScalingProfile.uniform(100, 2**16))
    expected = _oracle_overflow_step(0.9, 1.0, 1.0, 100, 2**16, 1.0, 20)
    assert expected is not None
    for _ in range(20):
        step_integer(ctrl, [1.0])
    assert ctrl.overflowed and ctrl.overflow_step == expected


def test_recover_examples():
    p = ScalingProfile.uniform(10, 2**20)
    assert recover([0, 0], 3, p).tolist() == [0.0, 0.0]
    one = ScalingProfile(q=2**20)
    assert recover([7], 0, one).tolist() == [7.0]
    assert recover([1000], 0, p, "state")[0] == pytest.approx(100.0)
    with pytest.raises(ValueError):
        recover([1], 0, p, "both")


@given(st.lists(finite, min_size=1, max_size=4), st.integers(0, 4), st.sampled_from([2.0, 10.0, 100.0]))
def test_recover_roundtrip_bound(y, k, s):
    p = ScalingProfile.uniform(s, 2**400)
    scale = Fraction(s) ** (k + 1) * Fraction(s)
    back = recover(quantize_array(np.array(y), scale), k, p)
    for a, b in zip(y, back):
        assert abs(a - b) <= float(1 / (2 * scale)) * (1 + 1e-12) + abs(a) * 1e-15


def test_recovery_within_propagated_bound(rng):
    for trial in range(20):
        n, l, m = 3, 2, 1
        sys = random_stable(rng, n, l, m, radius=0.8).with_x0(rng.standard_normal(n))
        p = ScalingProfile.uniform(50.0, 2**4000)
        ctrl = to_integer_controller(sys, p)
        ys = rng.uniform(-2, 2, size=(30, l))
        _, u = simulate(sys, ys)
        bound = RecoveryBound(ctrl)
        for k in range(30):
            x_hat = recover(ctrl.z, k, p, "state")
            b = bound.step(x_hat, ys[k], k)
            v, ov = ctrl.step(ys[k])
            assert not ov
            err = np.abs(recover(v, k, p) - u.samples[k])
            assert np.all(err <= b + 1e-12)


# -- overflow horizon ---------------------------------------------------------------

def test_nilpotent_unit_s1_is_unbounded():
    sys = StateSpace([[0.0, 0.0], [1.0, 0.0]], [[1.0], [0.0]], [[0.5, 0.25]], [[0.1]])
    ctrl = to_integer_controller(sys, ScalingProfile.integer_dynamics(10.0, 2**20))
    assert overflow_horizon(ctrl, 5.0) == UNBOUNDED


def test_small_q_finite_horizon_matches_exhaustive_oracle():
    sys = StateSpace([[0.5]], [[0.3]], [[0.4]], [[0.0]])
    q = 2**10
    ctrl = to_integer_controller(sys, ScalingProfile.uniform(10, q))
    T = overflow_horizon(ctrl, 1.0)
    assert 0 < T < 10
    # worst-case input (y = +/-1, constant sign) by big integers
    first = min(s for s in (_oracle_overflow_step(0.5, 0.3, 0.4, 10, q, y, 20) for y in (1.0, -1.0))
                if s is not None)
    assert T <= first


@given(st.integers(0, 2**31 - 1))
def test_horizon_monotone_in_q(seed):
    rng = np.random.default_rng(seed)
    sys = random_stable(rng, 2, 1, 1, radius=0.7)
    q = 2**24
    T1 = overflow_horizon(to_integer_controller(sys, ScalingProfile.uniform(10, q)), 1.0, max_steps=200)
    T2 = overflow_horizon(to_integer_controller(sys, ScalingProfile.uniform(10, 2 * q)), 1.0, max_steps=200)
    assert T2 >= T1


def test_horizon_conservative_random_runs(rng):
    early = 0
    for trial in range(200):
        sys = random_stable(rng, 2, 1, 1, radius=0.9)
        ctrl = to_integer_controller(sys, ScalingProfile.uniform(4, 2**30))
        T = overflow_horizon(ctrl, 1.0, max_steps=60)
        signs = rng.choice([-1.0, 1.0], size=(min(int(T), 60), 1))
        for y in signs:
            ctrl.step(y)
        early += ctrl.overflowed
    assert early == 0
