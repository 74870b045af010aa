import threading

import numpy as np
import pytest

from encfir import benchmark
from encfir.baselines import RefreshMissed
from encfir.encrypted_fir import EncryptedFirController, make_backend
from encfir.fir import FirFilter
from encfir.he_backend import EvaluationKeys, HeParams, KeyMaterial, keygen
from encfir.lti import DimensionError, StateSpace, simulate
from encfir.loop_service import (
    CloudServer,
    ControllerSpec,
    EncryptionConfig,
    IllPosedLoop,
    Scenario,
    SimTrace,
    actuator_client,
    bench_step_latency,
    closed_loop_matrix,
    decay_step,
    is_finite_trace,
    latency_vs_order,
    run_scenario,
    scenario_from_dict,
    sensor_client,
)
from encfir.quantizer import ScalingProfile
from encfir.schemas import SCENARIO_SCHEMA as SCENARIO, SchemaError, validate
from encfir.wire import DropPolicy, MsgType, WireMessage, inproc_pair, pack_params, pack_ciphertexts

BENCH_ENC = dict(s6=16.0, s7=16.0, y_max=[12.0, 200.0], headroom="exact")
SMALL = HeParams(ring_dim=16, t=2**20)
WIDE = HeParams(ring_dim=16, t=2**62, q_c=2**64)


@pytest.fixture(scope="module")
def bench_keys():
    return keygen(HeParams(), 3)


def fir_scenario(name="window-n7", steps=30, backend="mock", keys=None, **kw):
    enc = EncryptionConfig(backend=backend, keys=keys, **BENCH_ENC)
    spec = ControllerSpec("encrypted-fir", filter=benchmark.tap_filter(name), encryption=enc)
    return Scenario(benchmark.reactor(), spec, steps, seed=3, **kw)


def plain_fir(name, steps):
    return run_scenario(Scenario(benchmark.reactor(), ControllerSpec("fir", filter=benchmark.tap_filter(name)), steps))


def fir_on_trace(f, ys):
    """Plaintext FIR output on a recorded input sequence, zero history before k = 0."""
    return np.array([sum(tap @ ys[k - i] for i, tap in enumerate(f.taps) if k - i >= 0) for k in range(len(ys))])


def product_rounding_bound(f, ys, s6, s7):
    """Worst case of |q(h s6) q(y s7) / (s6 s7) - h y| summed over every product of a step."""
    out = []
    for k in range(len(ys)):
        b = 0.0
        for i, tap in enumerate(f.taps):
            y = ys[k - i] if k - i >= 0 else np.zeros(ys.shape[1])
            b = b + np.abs(tap) @ np.full_like(y, 0.5 / s7) + np.sum(np.abs(y)) * 0.5 / s6 \
                + tap.shape[1] * 0.25 / (s6 * s7)
        out.append(b)
    return np.array(out)


# -- closed-loop structure ------------------------------------------------------------

@pytest.mark.parametrize("name, radius", [("window-n7", 0.686), ("optimized-n2", 0.745), ("replacement-n2", 0.818)])
def test_benchmark_tap_sets_stabilize(name, radius):
    from encfir.fir import fir_to_statespace
    _, schur, rho = closed_loop_matrix(benchmark.reactor(), fir_to_statespace(benchmark.tap_filter(name)))
    assert schur and rho == pytest.approx(radius, abs=1e-3)


def test_closed_loop_matrix_scalar_example():
    plant = StateSpace([[1.2]], [[1.0]], [[1.0]], [[0.0]])
    ctrl = StateSpace([[0.5]], [[1.0]], [[-0.2]], [[-0.9]])
    a_cl, schur, rho = closed_loop_matrix(plant, ctrl)
    assert np.allclose(a_cl, [[0.3, -0.2], [1.0, 0.5]])
    assert schur and rho == pytest.approx(np.sqrt(0.35))


def test_closed_loop_ill_posed_and_dims():
    plant = StateSpace([[0.5]], [[1.0]], [[1.0]], [[1.0]])
    with pytest.raises(IllPosedLoop):
        closed_loop_matrix(plant, StateSpace([[0.0]], [[0.0]], [[0.0]], [[1.0]]))
    with pytest.raises(DimensionError):
        closed_loop_matrix(benchmark.reactor(), StateSpace([[0.0]], [[0.0]], [[0.0]], [[1.0]]))


def test_scenario_validation():
    with pytest.raises(DimensionError):
        Scenario(benchmark.reactor(), ControllerSpec("fir", filter=FirFilter([np.ones((1, 1))])), 3)
    with pytest.raises(ValueError):
        ControllerSpec("reset", model=benchmark.reactor())
    with pytest.raises(ValueError):
        Scenario(benchmark.reactor(), ControllerSpec("zero"), 3, transport="carrier-pigeon")


# -- plaintext loops -------------------------------------------------------------------------

def test_iir_loop_matches_joint_simulation(rng):
    plant = StateSpace([[0.9, 0.2], [0.0, 0.7]], [[0.0], [1.0]], [[1.0, 0.0]], [[0.0]], [1.0, -1.0])
    ctrl = StateSpace([[0.3]], [[1.0]], [[-0.4]], [[-0.5]], [0.2])
    tr = run_scenario(Scenario(plant, ControllerSpec("iir", model=ctrl), 60))
    a_cl, _, _ = closed_loop_matrix(plant, ctrl)
    z = np.concatenate([plant.x0, ctrl.x0])
    for k in range(60):
        assert np.allclose(tr.x[k], z[:2], atol=1e-9)
        z = a_cl @ z
    _, u = simulate(ctrl, tr.y)
    assert np.allclose(u.samples, tr.u, atol=1e-9)


def test_zero_controller_diverges_and_fir_decays():
    zero = run_scenario(Scenario(benchmark.reactor(), ControllerSpec("zero"), 80))
    assert zero.norm_x[-1] > 10 * zero.norm_x[0] and decay_step(zero) is None
    fir = plain_fir("window-n7", 80)
    assert decay_step(fir) is not None and fir.norm_x[-1] < 1e-6 * fir.norm_x[0]
    assert is_finite_trace(fir) and set(fir.flags) == {""}


def test_plain_loop_rejects_plant_feedthrough():
    plant = StateSpace([[0.5]], [[1.0]], [[1.0]], [[0.5]])
    with pytest.raises(IllPosedLoop):
        run_scenario(Scenario(plant, ControllerSpec("iir", model=StateSpace([[0.0]], [[0.0]], [[0.0]], [[0.1]])), 2))


# -- encrypted loops -------------------------------------------------------------------------

@pytest.mark.parametrize("name", list(benchmark.TAP_SETS))
def test_mock_encrypted_loop_tracks_plaintext(name):
    steps = 60
    enc = run_scenario(fir_scenario(name, steps))
    f = benchmark.tap_filter(name)
    gap = np.abs(enc.u - fir_on_trace(f, enc.y))
    assert np.all(gap <= product_rounding_bound(f, enc.y, 16.0, 16.0) + 1e-9)
    assert decay_step(enc) is not None and decay_step(enc) <= decay_step(plain_fir(name, steps)) + 10
    assert enc.meta["cloud_steps"] == steps and enc.meta["cloud_can_decrypt"] is None


def test_bfv_loop_matches_mock_bit_exact(bench_keys):
    steps = 12
    mock = run_scenario(fir_scenario("optimized-n2", steps))
    bfv = run_scenario(fir_scenario("optimized-n2", steps, backend="bfv", keys=bench_keys))
    assert bfv.v == mock.v and np.array_equal(bfv.x, mock.x)
    assert bfv.meta["cloud_can_decrypt"] is False
    assert set(bfv.flags) == {""}


def test_socket_transport_is_bit_exact(bench_keys):
    steps = 8
    a = run_scenario(fir_scenario("replacement-n2", steps, backend="bfv", keys=bench_keys))
    b = run_scenario(fir_scenario("replacement-n2", steps, backend="bfv", keys=bench_keys, transport="socket"))
    assert a.v == b.v and np.array_equal(a.u, b.u)
    assert b.meta["sent"][MsgType.SENSOR_DATA] == steps


def _walk(obj, seen=None):
    seen = set() if seen is None else seen
    if id(obj) in seen:
        return
    seen.add(id(obj))
    yield obj
    children = []
    if isinstance(obj, dict):
        children = list(obj.keys()) + list(obj.values())
    elif isinstance(obj, (list, tuple, set)):
        children = list(obj)
    elif hasattr(obj, "__dict__") and not isinstance(obj, type):
        children = list(vars(obj).values())
    for c in children:
        yield from _walk(c, seen)


def test_cloud_holds_no_secret_and_no_plaintext(bench_keys):
    tr = run_scenario(fir_scenario("optimized-n2", 4, backend="bfv", keys=bench_keys))
    session = tr.meta["cloud_session"]
    objs = list(_walk(session))
    assert not any(isinstance(o, KeyMaterial) for o in objs)
    assert any(isinstance(o, EvaluationKeys) for o in objs)
    secret = bench_keys.secret.tobytes()
    arrays = [o for o in objs if isinstance(o, np.ndarray)]
    assert not any(a.tobytes() == secret for a in arrays)
    # no floating-point signal values live on the cloud
    assert not any(a.dtype.kind == "f" for a in arrays)


def test_cloud_rejects_secret_key_in_params(bench_keys):
    plant_end, cloud_end = inproc_pair()
    from encfir.loop_service import serve_channel
    out = {}
    t = threading.Thread(target=lambda: out.setdefault("r", serve_channel(cloud_end, 5)))
    t.start()
    plant_end.send(WireMessage(MsgType.HELLO, b'{"role": "plant", "version": 1}'))
    assert plant_end.recv(5).type == MsgType.HELLO
    meta = {"backend": "bfv", "he_params": HeParams().to_dict(), "seed": 1, "session": "fir",
            "evaluation_keys": bench_keys.to_dict()}
    plant_end.send(WireMessage(MsgType.PARAMS, pack_params(meta, pack_ciphertexts(0, []))))
    reply = plant_end.recv(5)
    t.join(5)
    assert reply.type == MsgType.BYE and b"error" in reply.payload
    assert out["r"].error is not None


def test_actuator_client_decrypts_frame_log(bench_keys):
    import io
    from encfir.wire import RecordingChannel
    from encfir.loop_service import serve_channel
    sc = fir_scenario("optimized-n2", 5, backend="bfv", keys=bench_keys)
    plant_end, cloud_end = inproc_pair()
    log = io.BytesIO()
    t = threading.Thread(target=serve_channel, args=(cloud_end, 10), daemon=True)
    t.start()
    tr = sensor_client(sc, RecordingChannel(plant_end, log))
    t.join(10)
    us = actuator_client(log.getvalue(), bench_keys, 16.0, 16.0)
    assert len(us) == 5 and np.array_equal(np.array(us), tr.u)


# -- external refresh over the wire ------------------------------------------------------------

def refresh_scenario(period, steps, drop=None):
    plant = StateSpace([[0.8]], [[1.0]], [[1.0]], [[0.0]], [1.0])
    model = StateSpace([[0.5, 0.1], [0.0, 0.4]], [[1.0], [0.3]], [[-0.6, 0.2]], [[-0.3]])
    enc = EncryptionConfig(backend="mock", params=WIDE)
    spec = ControllerSpec("refresh", model=model, period=period,
                          profile=ScalingProfile.uniform(20.0, 2**62), encryption=enc)
    return Scenario(plant, spec, steps, refresh_timeout=0.5, timeout=5.0, drop=drop), model


def test_refresh_loop_counts_and_tracks_plaintext():
    sc, model = refresh_scenario(5, 30)
    tr = run_scenario(sc)
    assert tr.meta["refresh_down"] == [2] * 6 and tr.meta["refresh_up"] == [2] * 6
    plain = run_scenario(Scenario(sc.plant, ControllerSpec("iir", model=model), 30))
    assert np.max(np.abs(tr.u - plain.u)) < 0.1


@pytest.mark.parametrize("mtype", [MsgType.STATE_REFRESH_DOWN, MsgType.STATE_REFRESH_UP])
def test_dropped_refresh_stops_loop(mtype):
    sc, _ = refresh_scenario(4, 12, DropPolicy(types=(mtype,)))
    with pytest.raises(RefreshMissed) as info:
        run_scenario(sc)
    assert info.value.step in (3, 4)


# -- CSV and JSON ------------------------------------------------------------------------------

def test_trace_csv_roundtrip():
    tr = plain_fir("optimized-n2", 10)
    text = tr.to_csv()
    header = text.splitlines()[0].split(",")
    assert header == ["k", "x_1", "x_2", "x_3", "x_4", "y_1", "y_2", "u_1", "norm_x", "latency_ms", "flags"]
    back = SimTrace.from_csv(text, 4, 2, 1)
    assert np.array_equal(back.x, tr.x) and np.array_equal(back.u, tr.u)
    lines = tr.norm_plot_data().splitlines()
    assert len(lines) == 10 and float(lines[3].split()[1]) == tr.norm_x[3]


def test_scenario_from_dict():
    d = {"plant": {"builtin": "reactor"}, "steps": 5, "seed": 2,
         "controller": {"kind": "encrypted-fir", "filter": {"builtin": "window-n7"},
                        "encryption": {"backend": "mock", "s6": 16, "s7": 16, "y_max": [12, 200],
                                       "headroom": "exact"}}}
    validate(d, SCENARIO)
    sc = scenario_from_dict(d)
    assert sc.controller.encryption.s6 == 16.0 and sc.controller.filter.order == 7
    assert len(run_scenario(sc)) == 5
    with pytest.raises(SchemaError):
        validate({**d, "steps": -1}, SCENARIO)


# -- latency -----------------------------------------------------------------------------------

def test_mock_latency_is_small():
    be = make_backend("mock", SMALL, 0)
    ctrl = EncryptedFirController(benchmark.tap_filter("window-n7"), be, "full", 4.0, 4.0, 1.0)
    stats = bench_step_latency(ctrl, steps=20)
    assert len(stats.samples_ms) == 20 and stats.median_ms < 5.0
    assert stats.min_ms <= stats.median_ms <= stats.p99_ms


def test_latency_vs_order_fit_shape():
    res = latency_vs_order((1, 2, 4), backend="mock", params=SMALL, steps=3)
    assert set(res["median_ms"]) == {1, 2, 4} and res["r2"] <= 1.0
