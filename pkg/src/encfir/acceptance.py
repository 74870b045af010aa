"""Executable acceptance checks.

Each ``check_*`` function runs one criterion and returns a
:class:`CriterionResult`.  Sizes are arguments so the command line can run
a reduced pass; the defaults are the full sizes.  Oracles are independent of
the code under test where possible: big-integer convolution for encrypted
sums, the frequency-grid norm for H-infinity designs and exact rational
arithmetic for quantization.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import benchmark
from .baselines import random_equivalence_trials, reset_fir_equivalence_check
from .encrypted_fir import (
    EncryptedFirController,
    depth_audit,
    encrypt_input,
    integer_convolution,
    make_backend,
    quantize_input,
)
from .fir import (
    FirFilter,
    assemble_error_system,
    efficient_order_bound,
    fir_to_statespace,
    identity_weight,
    minimize_gamma,
    opcounts,
)
from .he_backend import (
    DEFAULT_PARAMS,
    FIG1_CIRCUITS,
    HeParams,
    MockBackend,
    certify_params,
    circuit_depth,
    keygen,
)
from .lti import StateSpace, hinf_norm, random_stable
from .loop_service import (
    ControllerSpec,
    EncryptionConfig,
    Scenario,
    bench_step_latency,
    closed_loop_matrix,
    decay_step,
    run_scenario,
)
from .quantizer import (
    UNBOUNDED,
    IntegerController,
    RecoveryBound,
    ScalingProfile,
    overflow_horizon,
    quantize,
    recover,
)

REAL_TIME_TARGET_MS = 100.0


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    asserted: bool = True  # False: evaluated and reported only
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        note = "" if self.asserted else " (reported, not asserted)"
        return f"criterion {self.number:2d} [{status}] {self.name}: {self.detail}{note}"


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_stabilization(steps: int = 300) -> CriterionResult:
    """Three published tap sets: Schur closed loop and 90 % decay within ``steps``."""
    plant = benchmark.reactor()
    parts, ok = [], True
    for name, f in benchmark.all_filters().items():
        _, schur, radius = closed_loop_matrix(plant, fir_to_statespace(f))
        trace = run_scenario(Scenario(plant, ControllerSpec("fir", filter=f), steps))
        k = decay_step(trace, 0.1)
        good = schur and radius < 1 and k is not None
        ok &= good
        parts.append(f"{name} rho={radius:.3f} decay@{k}")
    return CriterionResult(1, "benchmark stabilization", ok, "; ".join(parts))


@_timed
def check_efficiency_bound(max_dim: int = 6) -> CriterionResult:
    bound = efficient_order_bound(2, 1, 4)
    ok = bound == 14
    violations = 0
    cases = 0
    for l in range(1, max_dim + 1):
        for m in range(1, max_dim + 1):
            for n in range(1, max_dim + 1):
                b = efficient_order_bound(l, m, n)
                for order in range(0, int(math.ceil(b))):
                    if order >= b:
                        continue
                    fir, iir = opcounts(order, l, m, n)
                    cases += 1
                    if not (fir.multiplications < iir.multiplications and fir.additions < iir.additions):
                        violations += 1
    ok &= violations == 0
    return CriterionResult(2, "efficiency bound", ok,
                           f"bound(2,1,4)={bound:g}, {cases} orders below the bound, {violations} violations")


@_timed
def check_depth(orders=(0, 2, 7, 16), seed: int = 0) -> CriterionResult:
    rng = np.random.default_rng(seed)
    depths = {}
    for order in orders:
        f = FirFilter([rng.uniform(-1, 1, (1, 2)) for _ in range(order + 1)])
        for mode in ("partial", "full"):
            depths[(order, mode)] = depth_audit(f, mode)
    fig1 = tuple(circuit_depth(c) for c in FIG1_CIRCUITS.values())
    ok = all(d == 1 for d in depths.values()) and fig1 == (1, 1, 2)
    return CriterionResult(3, "depth audit", ok,
                           f"FIR depths {sorted(set(depths.values()))} over {len(depths)} cases, circuits {fig1}")


def _exactness_run(mode: str, steps: int, keys, seed: int) -> int:
    """Number of steps whose decrypted sum differs from the big-integer oracle."""
    rng = np.random.default_rng(seed)
    f = FirFilter([rng.uniform(-1, 1, (1, 2)) for _ in range(8)])
    be = make_backend("bfv", keys.params, seed, keys)
    ctrl = EncryptedFirController(f, be, mode, 100.0, 8.0, 10.0)
    history = []
    mismatches = 0
    for _ in range(steps):
        y = rng.uniform(-10, 10, 2)
        history.insert(0, quantize_input(y, ctrl.s7))
        history = history[: f.order + 1]
        v = [be.decrypt_value(c, strict=True) for c in ctrl.evaluate(encrypt_input(be, y, ctrl.s7))]
        if v != integer_convolution(ctrl.taps.int_taps, history):
            mismatches += 1
    return mismatches


@_timed
def check_exactness(steps: int = 1000, mock_steps: int = 100_000, seed: int = 0) -> CriterionResult:
    cert = certify_params(DEFAULT_PARAMS, seed=seed)
    keys = keygen(DEFAULT_PARAMS, seed)
    bad = {mode: _exactness_run(mode, steps, keys, seed + i) for i, mode in enumerate(("partial", "full"))}
    # long mock run: constant scaling, so nothing accumulates
    f = benchmark.tap_filter("window-n7")
    be = MockBackend(DEFAULT_PARAMS)
    ctrl = EncryptedFirController(f, be, "full", 8.0, 8.0, 10.0)
    rng = np.random.default_rng(seed)
    ys = rng.uniform(-10, 10, (mock_steps, 2))
    for y in ys:
        ctrl.evaluate(encrypt_input(be, y, 8.0))
    ok = cert.certified and not any(bad.values()) and be.max_level <= DEFAULT_PARAMS.levels
    return CriterionResult(4, "encrypted exactness", ok,
                           f"certified margin {cert.margin_bits:.1f} bits; mismatches partial={bad['partial']} "
                           f"full={bad['full']} over {steps} steps; mock run of {mock_steps} steps "
                           f"max level {be.max_level}")


@_timed
def check_latency(steps: int = 30, seed: int = 0) -> CriterionResult:
    f = benchmark.tap_filter("window-n7")
    be = make_backend("bfv", DEFAULT_PARAMS, seed)
    ctrl = EncryptedFirController(f, be, "full", 8.0, 8.0, 10.0)
    stats = bench_step_latency(ctrl, steps, seed=seed)
    ok = stats.median_ms < REAL_TIME_TARGET_MS
    return CriterionResult(5, "real-time target", ok,
                           f"full mode N=7 n_r=256: median {stats.median_ms:.1f} ms, p99 {stats.p99_ms:.1f} ms, "
                           f"target {REAL_TIME_TARGET_MS:.0f} ms", asserted=False)


def hinf_instances(count: int = 20, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n = int(rng.integers(1, 7))
        l, m = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        out.append(random_stable(rng, n, l, m, radius=0.9))
    return out


@_timed
def check_hinf(count: int = 20, orders=(1, 2, 4), seed: int = 0, audit_grid: int = 4096) -> CriterionResult:
    """Identity weight; each minimized design is re-audited on a finer grid."""
    worst_ratio = 0.0
    monotone = True
    for iir in hinf_instances(count, seed):
        weight = identity_weight(iir.n_inputs)
        gammas = []
        for order in orders:
            gamma, design = minimize_gamma(iir, weight, order)
            audit = hinf_norm(assemble_error_system(iir, design.filter, weight), audit_grid)
            worst_ratio = max(worst_ratio, audit / gamma)
            gammas.append(gamma)
        monotone &= all(b <= a for a, b in zip(gammas, gammas[1:]))
    ok = worst_ratio < 1.01 and monotone
    return CriterionResult(6, "H-infinity design soundness", ok,
                           f"{count} instances, orders {list(orders)}: max audit/gamma {worst_ratio:.4f}, "
                           f"gamma* non-increasing in N: {monotone}")


@_timed
def check_reset_equivalence(count: int = 50, seed: int = 0, tol: float = 1e-9) -> CriterionResult:
    reports = []
    for period in (3, 8):
        reports += random_equivalence_trials(count, period, seed=seed + period)
    rng = np.random.default_rng(seed)
    # the benchmark's reset controller has n = 4, l = 2, m = 1 and T = 8
    for _ in range(count):
        ctrl = random_stable(rng, 4, 2, 1, radius=0.95)
        reports.append(reset_fir_equivalence_check(ctrl, 8, steps=48, rng=rng))
    worst = max(max(r.window_deviation, r.pre_reset_deviation) for r in reports)
    ok = all(r.holds(tol) for r in reports)
    return CriterionResult(7, "reset/FIR equivalence", ok,
                           f"{len(reports)} controllers, worst deviation {worst:.2e} (tol {tol:g})")


@_timed
def check_quantization(runs: int = 100, steps: int = 30, seed: int = 0) -> CriterionResult:
    rng = np.random.default_rng(seed)
    excess = 0
    for _ in range(runs):
        n = int(rng.integers(1, 4))
        l, m = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        sys = random_stable(rng, n, l, m, radius=0.9).with_x0(rng.uniform(-1, 1, n))
        s = float(rng.choice([10.0, 100.0, 1000.0]))
        ctrl = IntegerController(sys, ScalingProfile.uniform(s, 2**400))
        tracker = RecoveryBound(ctrl)
        x = np.array(sys.x0)
        for k in range(steps):
            y = rng.uniform(-1, 1, l)
            x_hat = recover(ctrl.z, k, ctrl.profile, "state")
            bound = tracker.step(x_hat, y, k)
            v, _ = ctrl.step(y)
            u_exact = sys.c @ x + sys.d @ y
            if np.any(np.abs(recover(v, k, ctrl.profile, "input") - u_exact) > bound):
                excess += 1
            x = sys.a @ x + sys.b @ y
    grid_bad = 0
    grid_points = 0
    for s in (1.0, 3.0, 7.5, 10.0, 128.0, 1000.0):
        for x in np.linspace(-5, 5, 2001):
            grid_points += 1
            z = quantize(x, s)
            if abs(Fraction(float(x)) - Fraction(z) / Fraction(s)) > Fraction(1) / (2 * Fraction(s)):
                grid_bad += 1
    ok = excess == 0 and grid_bad == 0
    return CriterionResult(8, "quantization and recovery", ok,
                           f"{runs} runs: {excess} steps above the bound; grid of {grid_points} points: "
                           f"{grid_bad} violations")


@_timed
def check_overflow_horizon(trials: int = 1000, seed: int = 0, cap: int = 60) -> CriterionResult:
    rng = np.random.default_rng(seed)
    early = 0
    finite = 0
    for _ in range(trials):
        n = int(rng.integers(1, 4))
        sys = random_stable(rng, n, 1, 1, radius=0.9).with_x0(rng.uniform(-1, 1, n))
        s = float(rng.choice([2.0, 4.0, 10.0]))
        q = 2 ** int(rng.integers(16, 40))
        y_max = float(rng.uniform(0.1, 2.0))
        try:
            ctrl = IntegerController(sys, ScalingProfile.uniform(s, q))
        except OverflowError:
            continue
        horizon = overflow_horizon(ctrl, y_max, max_steps=cap)
        if horizon < cap:
            finite += 1
        for k in range(int(min(horizon, cap))):
            ctrl.step(rng.uniform(-y_max, y_max, 1))
            if ctrl.overflowed:
                early += 1
                break
    # s1 = 1 with nilpotent integer dynamics never accumulates
    nil = StateSpace(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]),
                     np.array([[1.0, 0.5]]), np.array([[0.2]]))
    unbounded = overflow_horizon(IntegerController(nil, ScalingProfile.integer_dynamics(10.0, 2**20)), 5.0)
    ok = early == 0 and unbounded == UNBOUNDED
    return CriterionResult(9, "overflow-horizon conservativeness", ok,
                           f"{trials} trials ({finite} with finite horizon): {early} early overflows; "
                           f"nilpotent s1=1 horizon {unbounded}")


@_timed
def check_transport(steps: int = 30, seed: int = 0) -> CriterionResult:
    plant = benchmark.reactor()
    f = benchmark.tap_filter("window-n7")
    keys = keygen(DEFAULT_PARAMS, seed)

    def scenario(transport):
        enc = EncryptionConfig(backend="bfv", mode="full", keys=keys)
        return Scenario(plant, ControllerSpec("encrypted-fir", filter=f, encryption=enc), steps,
                        transport=transport, seed=seed)

    a, b = run_scenario(scenario("socket")), run_scenario(scenario("inproc"))
    same = a.v == b.v and np.array_equal(a.u, b.u) and np.array_equal(a.x, b.x)
    # refresh session: n extra ciphertexts each way per period
    ctrl = StateSpace(np.array([[0.5, 0.1, 0.0], [0.0, 0.3, 0.2], [0.1, 0.0, 0.2]]),
                      np.array([[1.0], [0.5], [0.2]]), np.array([[-0.2, -0.1, 0.1]]), np.array([[-0.3]]))
    small = StateSpace(np.array([[0.9]]), np.array([[0.5]]), np.array([[1.0]]), np.zeros((1, 1)), x0=[1.0])
    period = 4
    enc = EncryptionConfig(backend="bfv", keys=keys)
    sc = Scenario(small, ControllerSpec("refresh", model=ctrl, profile=ScalingProfile.uniform(10.0, 2**20),
                                        period=period, encryption=enc), 10 * period, transport="socket", seed=seed)
    tr = run_scenario(sc)
    down, up = tr.meta["refresh_down"], tr.meta["refresh_up"]
    counts_ok = len(down) == 10 and all(c == ctrl.n_states for c in down + up) and len(up) == len(down)
    ok = same and counts_ok
    return CriterionResult(10, "transport equivalence", ok,
                           f"socket vs inproc identical over {steps} steps: {same}; refresh extra ciphertexts "
                           f"per period down={sorted(set(down))} up={sorted(set(up))} for n={ctrl.n_states}")


FULL_SIZES = {
    1: {}, 2: {}, 3: {}, 4: {}, 5: {}, 6: {}, 7: {}, 8: {}, 9: {}, 10: {},
}
QUICK_SIZES = {
    4: {"steps": 100, "mock_steps": 10_000},
    5: {"steps": 15},
    6: {"count": 3, "orders": (1, 2)},
    7: {"count": 10},
    8: {"runs": 20},
    9: {"trials": 200},
    10: {"steps": 10},
}
CHECKS = {
    1: check_stabilization, 2: check_efficiency_bound, 3: check_depth, 4: check_exactness,
    5: check_latency, 6: check_hinf, 7: check_reset_equivalence, 8: check_quantization,
    9: check_overflow_horizon, 10: check_transport,
}


def run_all(quick: bool = False, only=None) -> list[CriterionResult]:
    sizes = QUICK_SIZES if quick else FULL_SIZES
    return [CHECKS[i](**sizes.get(i, {})) for i in sorted(CHECKS) if only is None or i in only]
