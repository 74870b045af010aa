import numpy as np
import pytest
from hypothesis import given, strategies as st

from encfir import benchmark
from encfir.encrypted_fir import (
    EncryptedFirController,
    EncryptedHistory,
    HeadroomError,
    PrecomputedSession,
    decode_taps,
    decrypt_recover,
    depth_audit,
    encode_taps,
    encrypt_input,
    encrypted_step,
    exact_headroom_bound,
    headroom_bound,
    integer_convolution,
    make_backend,
    precomputed_step,
    quantize_input,
    recovery_bound,
)
from encfir.fir import FirFilter, InputHistory, evaluate_fir
from encfir.he_backend import DEFAULT_PARAMS, HeParams, MockBackend, keygen
from encfir.quantizer import quantize_array

BIG = HeParams(ring_dim=16, t=2**40)


@pytest.fixture(scope="module")
def bfv_keys():
    return keygen(DEFAULT_PARAMS, 21)


def random_filter(rng, order, l, m, scale=1.0):
    return FirFilter(tuple(scale * rng.uniform(-1, 1, size=(m, l)) for _ in range(order + 1)))


def run_session(backend, f, mode, s6, s7, ys, precompute=False):
    taps = encode_taps(f, s6, mode, backend, s7, np.max(np.abs(ys)) + 1)
    hist = EncryptedHistory(f.order, f.n_inputs, backend)
    sess = PrecomputedSession(backend, taps, hist) if precompute else None
    outs, oracle = [], []
    window = [np.zeros(f.n_inputs, dtype=object)] * (f.order + 1)
    for y in ys:
        enc = encrypt_input(backend, y, s7)
        v = sess.online(enc) if precompute else encrypted_step(backend, taps, hist, enc)
        outs.append([backend.decrypt_value(c) for c in v])
        window = [quantize_input(y, s7)] + window[:-1]
        oracle.append(integer_convolution(taps.int_taps, window))
    return outs, oracle


# -- tap encoding -------------------------------------------------------------------

def test_published_taps_at_s6_100():
    be = MockBackend(BIG)
    taps = encode_taps(benchmark.tap_filter("optimized-n2"), 100, "partial", be, 1, 1.0)
    assert [t.tolist()[0] for t in decode_taps(taps, be)] == [[-4893, -233], [5093, 17], [-881, 4]]


def test_zero_filter_payloads(bfv_keys):
    be = make_backend("bfv", keys=bfv_keys)
    f = FirFilter(tuple(np.zeros((2, 3)) for _ in range(3)))
    for mode in ("partial", "full"):
        taps = encode_taps(f, 50, mode, be, 10, 1.0)
        assert all(not v.any() for v in decode_taps(taps, be))


@given(st.integers(0, 2**31 - 1), st.sampled_from(["partial", "full"]))
def test_decode_equals_quantizer(seed, mode):
    rng = np.random.default_rng(seed)
    f = random_filter(rng, int(rng.integers(0, 4)), 2, 2, scale=30)
    be = MockBackend(BIG)
    taps = encode_taps(f, 77.5, mode, be, 3, 2.0)
    for got, tap in zip(decode_taps(taps, be), f.taps):
        assert got.tolist() == quantize_array(tap, 77.5).tolist()


def test_headroom_rules():
    f = benchmark.tap_filter("window-n7")
    be = MockBackend(DEFAULT_PARAMS)
    int_taps = [quantize_array(t, 16) for t in f.taps]
    prod = headroom_bound(int_taps, 2, quantize_array([200.0], 16)[0])
    exact = exact_headroom_bound(int_taps, [abs(v) for v in quantize_array([12.0, 200.0], 16)])
    assert exact <= prod
    with pytest.raises(HeadroomError) as info:
        encode_taps(f, 16, "full", be, 16, [12.0, 200.0])
    assert info.value.bound == prod
    taps = encode_taps(f, 16, "full", be, 16, [12.0, 200.0], headroom="exact")
    assert taps.order == 7
    with pytest.raises(ValueError):
        encode_taps(f, 16, "full", be, 16, 1.0, headroom="loose")


@given(st.integers(0, 2**31 - 1))
def test_exact_headroom_is_attained_and_never_exceeded(seed):
    rng = np.random.default_rng(seed)
    f = random_filter(rng, int(rng.integers(0, 4)), 2, 1, scale=5)
    int_taps = [quantize_array(t, 10) for t in f.taps]
    ymax = [int(v) for v in rng.integers(1, 50, size=2)]
    bound = exact_headroom_bound(int_taps, ymax)
    # the sign-matched input attains it
    hist = [np.array([int(np.sign(t[0, c])) * ymax[c] for c in range(2)], dtype=object) for t in int_taps]
    assert abs(integer_convolution(int_taps, hist)[0]) == bound
    for _ in range(20):
        hist = [rng.integers(-np.array(ymax), np.array(ymax) + 1).astype(object) for _ in int_taps]
        assert abs(integer_convolution(int_taps, hist)[0]) <= bound


# -- exactness ---------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["partial", "full"])
def test_zero_history_decrypts_to_zero(mode, bfv_keys):
    be = make_backend("bfv", keys=bfv_keys)
    f = benchmark.tap_filter("optimized-n2")
    taps = encode_taps(f, 16, mode, be, 16, 5.0)
    hist = EncryptedHistory(f.order, f.n_inputs, be)
    v = encrypted_step(be, taps, hist, encrypt_input(be, [0.0, 0.0], 16))
    assert be.decrypt_value(v[0]) == 0


@pytest.mark.parametrize("mode", ["partial", "full"])
def test_bfv_matches_integer_oracle(mode, bfv_keys):
    rng = np.random.default_rng(4)
    be = make_backend("bfv", keys=bfv_keys, seed=2)
    f = random_filter(rng, 3, 2, 2, scale=2)
    ys = rng.uniform(-5, 5, size=(40, 2))
    outs, oracle = run_session(be, f, mode, 100, 8, ys)
    assert outs == oracle


@given(st.integers(0, 2**31 - 1), st.sampled_from(["partial", "full"]),
       st.integers(0, 6), st.integers(1, 3), st.integers(1, 3))
def test_mock_matches_integer_oracle(seed, mode, order, l, m):
    rng = np.random.default_rng(seed)
    f = random_filter(rng, order, l, m, scale=10)
    ys = rng.uniform(-3, 3, size=(order + 5, l))
    outs, oracle = run_session(MockBackend(BIG), f, mode, 64, 32, ys)
    assert outs == oracle


@given(st.integers(0, 2**31 - 1), st.sampled_from(["partial", "full"]), st.integers(0, 5))
def test_precomputed_equals_direct(seed, mode, order):
    rng = np.random.default_rng(seed)
    f = random_filter(rng, order, 2, 2, scale=10)
    ys = rng.uniform(-3, 3, size=(order + 4, 2))
    direct, _ = run_session(MockBackend(BIG), f, mode, 64, 32, ys)
    pre, _ = run_session(MockBackend(BIG), f, mode, 64, 32, ys, precompute=True)
    assert direct == pre


def test_precomputed_online_cost_and_zero_order():
    be = MockBackend(BIG)
    f = random_filter(np.random.default_rng(1), 4, 3, 2)
    taps = encode_taps(f, 10, "full", be, 10, 1.0)
    sess = PrecomputedSession(be, taps, EncryptedHistory(4, 3, be))
    sess.online(encrypt_input(be, [0.1, 0.2, 0.3], 10))
    assert sess.online_counter["mul"] == 2 * 3
    g = FirFilter((np.ones((1, 1)),))
    taps0 = encode_taps(g, 10, "partial", be, 10, 1.0)
    s0 = PrecomputedSession(be, taps0, EncryptedHistory(0, 1, be))
    s0.prepare()
    assert be.decrypt_value(s0.deferred[0]) == 0
    out = precomputed_step(be, taps0, EncryptedHistory(0, 1, be), encrypt_input(be, [0.5], 10))
    assert be.decrypt_value(out[0]) == 50


# -- depth -------------------------------------------------------------------------------

@pytest.mark.parametrize("order", [0, 2, 7, 16])
@pytest.mark.parametrize("mode", ["partial", "full"])
def test_depth_is_one(order, mode):
    rng = np.random.default_rng(order)
    for l, m in ((1, 1), (2, 1), (3, 2)):
        assert depth_audit(random_filter(rng, order, l, m), mode) == 1


# -- recovery ------------------------------------------------------------------------------

def test_recover_zero():
    be = MockBackend(BIG)
    assert decrypt_recover(be, [be.encrypt(0)], 16, 16).tolist() == [0.0]


def test_recovery_bound_constant_over_long_run():
    rng = np.random.default_rng(3)
    f = benchmark.tap_filter("optimized-n2")
    ctrl = EncryptedFirController(f, MockBackend(DEFAULT_PARAMS), "full", 16, 16, 2.0, headroom="exact")
    h = InputHistory(f.order, f.n_inputs)
    worst_ratio = 0.0
    for k in range(10_000):
        y = rng.uniform(-2, 2, size=2)
        h.push(y)
        u = ctrl.step(y)
        err = np.abs(u - evaluate_fir(f, h))
        bound = recovery_bound(f, h, 16, 16)
        assert np.all(err <= bound + 1e-12)
        worst_ratio = max(worst_ratio, float(np.max(err / bound)))
    # the bound holds with the same constant scaling at every k
    assert worst_ratio <= 1.0


def test_make_backend_rejects_unknown():
    with pytest.raises(ValueError):
        make_backend("ckks")
