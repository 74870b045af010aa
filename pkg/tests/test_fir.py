import warnings

import numpy as np
import pytest
import sympy
from hypothesis import given, strategies as st

from encfir import benchmark
from encfir.fir import (
    FirFilter,
    InfeasibleDesign,
    InputHistory,
    NotSchurWarning,
    OpCount,
    RegularizedInverseWarning,
    assemble_error_system,
    causal_inverse_weight,
    efficient_order_bound,
    evaluate_fir,
    fir_to_statespace,
    hinf_fir_design,
    identity_weight,
    minimize_gamma,
    opcounts,
    precompute_split,
    truncation_indicator,
    window_fir,
)
from encfir.lti import (
    DimensionError,
    StateSpace,
    explicit_output,
    hinf_norm,
    markov_parameters,
    parallel_difference,
    random_stable,
    series,
    simulate,
    spectral_radius,
)

seeds = st.integers(0, 2**31 - 1)


def scalar(a, b, c, d):
    return StateSpace([[a]], [[b]], [[c]], [[d]])


def run_fir(f, ys):
    h = InputHistory(f.order, f.n_inputs)
    out = []
    for y in ys:
        h.push(y)
        out.append(evaluate_fir(f, h))
    return np.array(out)


# -- window method ----------------------------------------------------------------

def test_window_examples():
    f = window_fir(scalar(0.5, 1, 1, 0), 3)
    assert [float(t[0, 0]) for t in f.taps] == [0.0, 1.0, 0.5, 0.25]
    g = window_fir(scalar(0.5, 1, 1, 2.5), 0)
    assert g.order == 0 and g.taps[0][0, 0] == 2.5


@given(seeds, st.integers(0, 10))
def test_window_taps_are_markov_parameters(seed, order):
    rng = np.random.default_rng(seed)
    sys = random_stable(rng, 3, 2, 2)
    f = window_fir(sys, order)
    assert np.array_equal(f.taps[0], sys.d)
    for t, p in zip(f.taps, markov_parameters(sys, order)):
        assert np.array_equal(t, p)


def test_window_warns_for_unstable_controller():
    with pytest.warns(NotSchurWarning):
        window_fir(scalar(1.2, 1, 1, 0), 4)


def test_truncation_indicator():
    assert truncation_indicator(scalar(0.5, 1, 1, 0), 3) == pytest.approx(0.125)


# -- realization -----------------------------------------------------------------

def test_fir_to_statespace_layout():
    f = FirFilter(([[1.0]], [[2.0]], [[3.0]]))
    ss = fir_to_statespace(f)
    assert np.array_equal(ss.a, [[0, 0], [1, 0]])
    assert np.array_equal(ss.c, [[2, 3]]) and ss.d[0, 0] == 1.0
    assert fir_to_statespace(FirFilter(([[4.0, 5.0]],))).n_states == 0


@given(seeds, st.integers(1, 8), st.integers(1, 3), st.integers(1, 3))
def test_realization_roundtrip_and_nilpotent(seed, order, l, m):
    rng = np.random.default_rng(seed)
    f = FirFilter(tuple(rng.standard_normal((m, l)) for _ in range(order + 1)))
    ss = fir_to_statespace(f)
    assert not np.linalg.matrix_power(ss.a, order).any()
    back = window_fir(ss, order)
    for a, b in zip(f.taps, back.taps):
        assert np.array_equal(a, b)
    ys = rng.standard_normal((40, l))
    assert np.allclose(simulate(ss, ys)[1].samples, run_fir(f, ys), atol=1e-12)


# -- evaluation --------------------------------------------------------------------

def test_evaluate_examples(rng):
    f = FirFilter(tuple(rng.standard_normal((2, 3)) for _ in range(4)))
    assert not evaluate_fir(f, InputHistory(3, 3)).any()
    g = FirFilter((rng.standard_normal((2, 3)),))
    h = InputHistory(0, 3)
    h.push([1.0, -2.0, 0.5])
    assert np.allclose(evaluate_fir(g, h), g.taps[0] @ [1.0, -2.0, 0.5])
    with pytest.raises(DimensionError):
        h.push([1.0])


@given(seeds, st.integers(1, 10))
def test_window_fir_equals_explicit_output_inside_window(seed, order):
    rng = np.random.default_rng(seed)
    sys = random_stable(rng, 3, 2, 1)
    ys = rng.standard_normal((order + 1, 2))
    got = run_fir(window_fir(sys, order), ys)
    for k in range(order + 1):
        assert np.allclose(got[k], explicit_output(sys, ys, k), atol=1e-10)


def test_window_error_decreases_with_order(rng):
    ctrl = random_stable(rng, 4, 2, 1, radius=0.8)
    ys = rng.uniform(-1, 1, size=(200, 2))
    _, u = simulate(ctrl, ys)
    errors = []
    for order in (2, 4, 8, 16):
        err = np.max(np.abs(run_fir(window_fir(ctrl, order), ys) - u.samples))
        # tail bound: |C A^N| times the largest reachable state
        x, _ = simulate(ctrl, ys)
        assert err <= truncation_indicator(ctrl, order) * np.max(np.linalg.norm(x.samples, axis=1)) + 1e-12
        errors.append(err)
    assert all(b <= a for a, b in zip(errors, errors[1:]))


@given(seeds, st.integers(0, 6))
def test_precompute_split_is_exact(seed, order):
    rng = np.random.default_rng(seed)
    f = FirFilter(tuple(rng.integers(-9, 9, size=(2, 3)).astype(float) for _ in range(order + 1)))
    h = InputHistory(order, 3)
    for _ in range(order + 3):
        h.push(rng.integers(-9, 9, size=3).astype(float))
        cnt = OpCount()
        imm, dfr = precompute_split(f, h, cnt)
        assert np.array_equal(imm + dfr, evaluate_fir(f, h))
        assert cnt.multiplications == 2 * 3
        if order == 0:
            assert not dfr.any()


# -- operation counts ---------------------------------------------------------------

def test_opcount_examples():
    assert efficient_order_bound(2, 1, 4) == 14
    fir, iir = opcounts(0, 1, 1, 1)
    # m(N + l - 1) additions: a single scalar product needs none
    assert (fir.multiplications, fir.additions) == (1, 0)
    assert (iir.multiplications, iir.additions) == (4, 2)


def test_efficiency_bound_exhaustive():
    for l in range(1, 7):
        for m in range(1, 7):
            for n in range(1, 7):
                bound = efficient_order_bound(l, m, n)
                for order in range(0, int(np.ceil(bound)) + 3):
                    fir, iir = opcounts(order, l, m, n)
                    cheaper = fir.multiplications < iir.multiplications and fir.additions < iir.additions
                    if order < bound:
                        assert cheaper, (l, m, n, order)


def test_bound_formula_symbolic():
    l, m, n, N = sympy.symbols("l m n N", positive=True)
    mult = sympy.solve(sympy.Eq(l * m * (N + 1), (l + n) * (m + n)), N)[0]
    add = sympy.solve(sympy.Eq(m * (N + l - 1), (l + n) * (m + n - 1)), N)[0]
    for dims in ((2, 1, 4), (1, 1, 1), (3, 2, 5)):
        sub = dict(zip((l, m, n), dims))
        assert efficient_order_bound(*dims) == pytest.approx(float(sympy.Min(mult.subs(sub), add.subs(sub))))


def test_counted_evaluation_matches_formula(rng):
    for order, l, m in ((0, 1, 1), (3, 2, 1), (5, 3, 2)):
        f = FirFilter(tuple(rng.standard_normal((m, l)) for _ in range(order + 1)))
        cnt = OpCount()
        h = InputHistory(order, l)
        h.push(rng.standard_normal(l))
        evaluate_fir(f, h, cnt)
        fir, _ = opcounts(order, l, m, 1)
        assert cnt.multiplications == fir.multiplications
        # the sum of N+1 matrix-vector products adds m(N+1)(l-1) + mN terms
        assert cnt.additions == m * (order + 1) * (l - 1)


# -- weights and the error system ------------------------------------------------------

def test_causal_inverse_examples(rng):
    inv = causal_inverse_weight(StateSpace.gain([[2.0]]))
    assert inv.d[0, 0] == 0.5
    ctrl = random_stable(rng, 3, 2, 2)
    ctrl = StateSpace(ctrl.a, ctrl.b, ctrl.c, ctrl.d + 3 * np.eye(2))
    w = causal_inverse_weight(ctrl)
    if spectral_radius(w.a) < 1:
        gap = parallel_difference(series(w, ctrl), identity_weight(2))
        assert hinf_norm(gap) < 1e-6
    with pytest.warns(RegularizedInverseWarning):
        causal_inverse_weight(StateSpace.gain([[1.0, 2.0]]))


def test_error_system_zero_for_exact_fir(rng):
    f = FirFilter(tuple(rng.standard_normal((1, 2)) for _ in range(4)))
    iir = fir_to_statespace(f)
    e = assemble_error_system(iir, f, identity_weight(2))
    _, out = simulate(e, rng.standard_normal((50, 2)))
    assert np.max(np.abs(out.samples)) < 1e-12


@given(seeds)
def test_error_system_matches_two_branch_oracle(seed):
    rng = np.random.default_rng(seed)
    iir = random_stable(rng, 2, 2, 1, radius=0.8)
    weight = random_stable(rng, 2, 2, 2, radius=0.7)
    f = window_fir(iir, 3)
    w = rng.standard_normal((60, 2))
    _, yw = simulate(weight, w)
    _, u_iir = simulate(iir, yw.samples)
    _, u_fir = simulate(fir_to_statespace(f), yw.samples)
    _, e = simulate(assemble_error_system(iir, f, weight), w)
    assert np.allclose(e.samples, u_fir.samples - u_iir.samples, atol=1e-9)


def test_error_system_block_structure(rng):
    iir = random_stable(rng, 3, 1, 1)
    weight = random_stable(rng, 2, 1, 1)
    f = window_fir(iir, 2)
    a = assemble_error_system(iir, f, weight).a
    assert np.array_equal(a[:2, :2], weight.a)
    assert np.array_equal(a[2:5, 2:5], iir.a)
    assert np.array_equal(a[5:, 5:], fir_to_statespace(f).a)
    assert not a[:2, 2:].any() and not a[2:5, 5:].any()


# -- H-infinity design ------------------------------------------------------------------

def test_design_of_exact_fir_reproduces_taps():
    f = FirFilter(([[0.5]], [[-0.3]], [[0.2]]))
    iir = fir_to_statespace(f)
    d = hinf_fir_design(iir, identity_weight(1), 2, 1e-3)
    assert d.audit < 1e-3 * 1.01
    for a, b in zip(f.taps, d.filter.taps):
        assert np.allclose(a, b, atol=1e-3)


def test_design_infeasible_below_residual():
    iir = scalar(0.8, 1.0, 1.0, 0.0)
    with pytest.raises(InfeasibleDesign):
        hinf_fir_design(iir, identity_weight(1), 0, 1e-9)


def test_designs_pass_audit_and_gamma_decreases(rng):
    for _ in range(3):
        iir = random_stable(rng, 3, 1, 1, radius=0.7)
        gammas = []
        for order in (1, 2, 4):
            g, d = minimize_gamma(iir, identity_weight(1), order)
            assert hinf_norm(assemble_error_system(iir, d.filter, identity_weight(1)), 4096) < g * 1.01
            gammas.append(g)
        assert all(b <= a * (1 + 1e-9) for a, b in zip(gammas, gammas[1:]))


def test_minimize_gamma_on_exact_fir():
    iir = fir_to_statespace(FirFilter(([[1.0]], [[0.5]])))
    g, _ = minimize_gamma(iir, identity_weight(1), 2, cap=1.0)
    assert g <= 1e-3


def test_design_with_inverse_weight():
    iir = StateSpace([[0.5, 0.1], [0.0, 0.3]], [[1.0], [0.5]], [[0.4, -0.2]], [[1.0]])
    d = hinf_fir_design(iir, causal_inverse_weight(iir), 3, 0.2)
    assert d.audit < 0.2 * 1.01
    assert np.all(np.linalg.eigvalsh(d.certificate) > 0)


def test_filter_json_roundtrip(tmp_path):
    f = benchmark.tap_filter("window-n7")
    f.save(tmp_path / "f.json")
    g = FirFilter.load(tmp_path / "f.json")
    assert g.order == 7 and all(np.array_equal(a, b) for a, b in zip(f.taps, g.taps))
    with pytest.raises(ValueError):
        FirFilter.from_dict({"order": 3, "taps": [[[1.0]]]})
