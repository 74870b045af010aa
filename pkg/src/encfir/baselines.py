"""Reference strategies for unlimited-time encrypted control.

* :class:`ResetController` -- the controller state is reset every ``T``
  steps, which caps the accumulation of the scaling factor ``s1``.
* External refresh -- every ``T`` steps the encrypted state travels to the
  key holder, is decrypted, rescaled to ``s0``, re-encrypted and sent back.
  :class:`RefreshCloud` and :class:`RefreshPlantSide` hold the two halves;
  :class:`RefreshSession` drives both in one process and counts the extra
  ciphertexts.  The networked version lives in :mod:`encfir.loop_service`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .fir import InputHistory, NotSchurWarning, evaluate_fir, window_fir
from .lti import DimensionError, StateSpace, random_stable
from .quantizer import (
    IntegerController,
    RecoveryBound,
    overflow_horizon,
    quantize_array,
    recover,
)


# -- periodic reset ----------------------------------------------------------------

class ResetController:
    """Dynamic controller whose state returns to ``x_reset`` whenever ``(k+1) mod T = 0``."""

    def __init__(self, sys: StateSpace, period: int, x_reset=None):
        if period < 1:
            raise ValueError("reset period must be >= 1")
        self.sys = sys
        self.period = int(period)
        self.x_reset = np.array(sys.x0 if x_reset is None else x_reset, dtype=float).reshape(-1)
        if self.x_reset.size != sys.n_states:
            raise DimensionError("reset value has the wrong width")
        self.xr = self.x_reset.copy()
        self.k = 0

    def step(self, y) -> np.ndarray:
        return step_reset(self, y)


def step_reset(rc: ResetController, y) -> np.ndarray:
    """``u_r = C x_r + D y``, then reset or ``x_r <- A x_r + B y``."""
    s = rc.sys
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != s.n_inputs:
        raise DimensionError(f"input width {y.size} != {s.n_inputs}")
    u = s.c @ rc.xr + s.d @ y
    if (rc.k + 1) % rc.period == 0:
        rc.xr = rc.x_reset.copy()
    else:
        rc.xr = s.a @ rc.xr + s.b @ y
    rc.k += 1
    return u


def reset_explicit_output(sys: StateSpace, period: int, inputs, k: int, x_reset=None) -> np.ndarray:
    """``C A^dk x_reset + sum_{j<dk} C A^j B y(k-1-j) + D y(k)`` with ``dk = k mod T``.

    For ``k < T`` the reset value is the initial state.
    """
    y = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
    x_reset = np.asarray(sys.x0 if x_reset is None else x_reset, dtype=float)
    dk = k % period
    out = sys.d @ y[k]
    power = np.eye(sys.n_states)
    for j in range(dk):
        out = out + sys.c @ power @ sys.b @ y[k - 1 - j]
        power = power @ sys.a
    return out + sys.c @ power @ x_reset


@dataclass
class EquivalenceReport:
    period: int
    order: int
    window_deviation: float  # max |u_r - u_f| over k = 0..N
    pre_reset_deviation: float  # max over k with k mod T = N
    elsewhere_deviation: float  # max over all other k
    steps: int

    def holds(self, tol: float = 1e-9) -> bool:
        return self.window_deviation <= tol and self.pre_reset_deviation <= tol


def reset_fir_equivalence_check(ctrl: StateSpace, period: int, inputs=None, steps: int | None = None,
                                rng: np.random.Generator | None = None) -> EquivalenceReport:
    """Compare the reset controller with the window FIR of order ``N = T - 1``.

    Requires ``x0 = 0``; both start from zero prehistory.  Equality is
    expected on ``k = 0..N`` and at every ``k`` with ``k mod T = N``.
    """
    if np.any(ctrl.x0 != 0):
        raise ValueError("the equivalence requires a zero initial controller state")
    if period < 1:
        raise ValueError("reset period must be >= 1")
    order = period - 1
    if inputs is None:
        rng = rng or np.random.default_rng(0)
        steps = steps or 5 * period
        inputs = rng.standard_normal((steps, ctrl.n_inputs))
    inputs = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
    steps = len(inputs) if steps is None else steps
    f = _window_unchecked(ctrl, order)
    rc = ResetController(ctrl, period, np.zeros(ctrl.n_states))
    hist = InputHistory(order, ctrl.n_inputs)
    win = pre = other = 0.0
    for k in range(steps):
        y = inputs[k]
        u_r = step_reset(rc, y)
        hist.push(y)
        dev = float(np.max(np.abs(u_r - evaluate_fir(f, hist)), initial=0.0))
        if k <= order:
            win = max(win, dev)
        elif k % period == order:
            pre = max(pre, dev)
        else:
            other = max(other, dev)
    return EquivalenceReport(period, order, win, pre, other, steps)


def _window_unchecked(ctrl: StateSpace, order: int):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotSchurWarning)
        return window_fir(ctrl, order)


def random_equivalence_trials(count: int, period: int, seed: int = 0, steps: int | None = None) -> list:
    """Equivalence reports for ``count`` random Schur-stable controllers with ``x0 = 0``."""
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(count):
        n = int(rng.integers(1, 6))
        l, m = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        ctrl = random_stable(rng, n, l, m, radius=0.95)
        reports.append(reset_fir_equivalence_check(ctrl, period, steps=steps or 6 * period, rng=rng))
    return reports


# -- external refresh ------------------------------------------------------------------

class RefreshMissed(RuntimeError):
    """A state refresh did not arrive when due; the session halts."""


class RefreshCloud:
    """Cloud half of an externally refreshed encrypted controller.

    Holds the integer matrices as plaintexts and the encrypted state; it
    never sees keys that decrypt.  After every ``T``-th step it hands out the
    encrypted state and refuses to continue until a fresh one arrives.
    """

    def __init__(self, backend, a_bar, b_bar, c_bar, d_bar, z_cts: list, period: int):
        self.backend = backend
        self.period = period
        self.mats = {name: [[backend.encode(int(v)) for v in row] for row in np.asarray(m, dtype=object)]
                     for name, m in (("a", a_bar), ("b", b_bar), ("c", c_bar), ("d", d_bar))}
        self.shape = (np.asarray(c_bar).shape[0], np.asarray(b_bar).shape[1], np.asarray(a_bar).shape[0])
        self.z = list(z_cts)
        self.kappa = 0
        self.awaiting_refresh = False

    def _affine(self, rows_x, x, rows_y, y):
        out = []
        for rx, ry in zip(rows_x, rows_y):
            acc = None
            for coef, ct in list(zip(rx, x)) + list(zip(ry, y)):
                term = self.backend.mul_plain(ct, coef)
                acc = term if acc is None else self.backend.add(acc, term)
            out.append(acc if acc is not None else self.backend.zero())
        return out

    def step(self, y_cts: list):
        """Returns ``(v_cts, refresh_down)``; ``refresh_down`` is the state after every ``T``-th step."""
        if self.awaiting_refresh:
            raise RefreshMissed(f"state refresh overdue after local step {self.kappa}")
        m, l, n = self.shape
        if len(y_cts) != l:
            raise DimensionError("wrong number of input ciphertexts")
        v = self._affine(self.mats["c"], self.z, self.mats["d"], y_cts)
        self.z = self._affine(self.mats["a"], self.z, self.mats["b"], y_cts) if n else []
        self.kappa += 1
        down = None
        if self.kappa == self.period:
            self.awaiting_refresh = True
            down = list(self.z)
        return v, down

    def accept_refresh(self, z_cts: list) -> None:
        if len(z_cts) != self.shape[2]:
            raise DimensionError("refresh carries the wrong number of state ciphertexts")
        self.z = list(z_cts)
        self.kappa = 0
        self.awaiting_refresh = False


class RefreshPlantSide:
    """Sensor and actuator half: holds the secret key and the scaling profile."""

    def __init__(self, backend, ctrl: IntegerController, period: int):
        self.backend = backend
        self.ctrl = ctrl
        self.profile = ctrl.profile
        self.period = period
        self.kappa = 0

    def initial_state(self) -> list:
        return [self.backend.encrypt(int(v)) for v in self.ctrl.z]

    def sense(self, y) -> list:
        """Encrypt ``round(s1^(kappa+1) s5 y)`` for the local step ``kappa``."""
        return [self.backend.encrypt(int(v)) for v in self.ctrl.prescale_input(y, self.kappa)]

    def actuate(self, v_cts: list) -> np.ndarray:
        v = [self.backend.decrypt_value(c) for c in v_cts]
        u = recover(v, self.kappa, self.profile, "input")
        self.kappa += 1
        return u

    def refresh(self, z_cts: list) -> list:
        """Decrypt ``z(T)``, recover ``x = z / (s0 s1^T)`` and re-encrypt ``round(s0 x)``."""
        z = [self.backend.decrypt_value(c) for c in z_cts]
        x = recover(z, self.kappa, self.profile, "state")
        self.kappa = 0
        return [self.backend.encrypt(int(v)) for v in quantize_array(x, self.profile.s0)]


@dataclass
class RefreshSession:
    """In-process refresh loop between a :class:`RefreshPlantSide` and a :class:`RefreshCloud`.

    ``drop`` is an optional predicate ``drop(k, direction)`` that discards a
    refresh message, modelling packet loss; the session then halts with
    :class:`RefreshMissed` on the next step.
    """

    plant_side: RefreshPlantSide
    cloud: RefreshCloud
    period: int
    drop: object = None
    k: int = 0
    sent_down: list = field(default_factory=list)
    sent_up: list = field(default_factory=list)

    def step(self, y) -> np.ndarray:
        v_cts, down = self.cloud.step(self.plant_side.sense(y))
        u = self.plant_side.actuate(v_cts)
        if down is not None:
            if self.drop is not None and self.drop(self.k, "down"):
                self.k += 1
                return u
            self.sent_down.append(len(down))
            up = self.plant_side.refresh(down)
            if self.drop is not None and self.drop(self.k, "up"):
                self.k += 1
                return u
            self.sent_up.append(len(up))
            self.cloud.accept_refresh(up)
        self.k += 1
        return u


def external_refresh_session(ctrl: IntegerController, period: int, backend, y_max: float | None = None,
                             drop=None) -> RefreshSession:
    """Build a refresh session; ``overflow_horizon(ctrl, y_max) >= T`` is required when ``y_max`` is given."""
    if period < 1:
        raise ValueError("refresh period must be >= 1")
    if y_max is not None:
        horizon = overflow_horizon(ctrl, y_max, max_steps=period + 1)
        if horizon < period:
            raise ValueError(f"overflow horizon {horizon} is shorter than the refresh period {period}")
    plant_side = RefreshPlantSide(backend, ctrl, period)
    cloud = RefreshCloud(backend, ctrl.a_bar, ctrl.b_bar, ctrl.c_bar, ctrl.d_bar,
                         plant_side.initial_state(), period)
    return RefreshSession(plant_side, cloud, period, drop)


def refresh_recovery_bounds(ctrl: IntegerController, period: int, inputs) -> np.ndarray:
    """Per-step bound on ``|u_refresh - u_plain|`` for a refresh session fed ``inputs``.

    The quantization errors are propagated with the local step index; each
    refresh adds the re-encoding error ``1 / (2 s0)`` to the state bound.
    """
    sys = ctrl.sys
    inputs = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
    tracker = RecoveryBound(ctrl)
    x = np.array(sys.x0, dtype=float)
    out = []
    for k, y in enumerate(inputs):
        kappa = k % period
        out.append(tracker.step(x, y, kappa))
        x = sys.a @ x + sys.b @ y
        if kappa == period - 1:
            tracker.state = tracker.state + 0.5 / ctrl.profile.s0
    return np.array(out)
