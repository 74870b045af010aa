"""Scale-and-round quantization and the integer reformulation of a dynamic controller.

All integer quantities are Python ints (arbitrary precision), held in object
arrays where a matrix shape is needed.  Arithmetic modulo ``q`` uses the
centred residue set ``{-floor(q/2), ..., ceil(q/2) - 1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .lti import DimensionError, StateSpace

UNBOUNDED = math.inf

_REL_TOL = 1e-12


class QuantizationOverflow(OverflowError):
    """A quantized quantity does not fit into Z_q."""


# -- scalar helpers ----------------------------------------------------------

def round_half_away(x) -> int:
    """Nearest integer, ties rounded away from zero.  Exact for Fractions."""
    if isinstance(x, Fraction):
        n, d = abs(x.numerator), x.denominator
        r = (2 * n + d) // (2 * d)
        return r if x >= 0 else -r
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x!r}")
    r = math.floor(abs(x) + 0.5)
    return int(r) if x >= 0 else -int(r)


def quantize(x, s: float) -> int:
    """``round(s * x)`` with ties away from zero; ``|x - result/s| <= 1/(2s)``."""
    if s < 1:
        raise ValueError(f"scaling factor must be >= 1, got {s}")
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x!r}")
    v = s * x
    # the float product may cross a rounding tie; settle those cases exactly
    if abs(v) < 2.0**52 and abs(abs(v - math.trunc(v)) - 0.5) > 1e-6:
        return round_half_away(v)
    return round_half_away(Fraction(s) * Fraction(x))


def quantize_array(x, s) -> np.ndarray:
    """Entrywise :func:`quantize` returning an object array of Python ints.

    ``s`` may be a float or a :class:`fractions.Fraction` (exact scaling).
    """
    arr = np.asarray(x, dtype=float)
    out = np.empty(arr.shape, dtype=object)
    if isinstance(s, Fraction):
        if s < 1:
            raise ValueError("scaling factor must be >= 1")
        for idx, v in np.ndenumerate(arr):
            if not math.isfinite(v):
                raise ValueError("cannot quantize non-finite value")
            out[idx] = round_half_away(s * Fraction(float(v)))
    else:
        for idx, v in np.ndenumerate(arr):
            out[idx] = quantize(v, s)
    return out


def zq_bounds(q: int) -> tuple[int, int]:
    """Inclusive ``(low, high)`` of the centred residue set for modulus ``q``."""
    return -(q // 2), (q + 1) // 2 - 1


def zq_wrap(x: int, q: int) -> int:
    """Centred representative of ``x`` modulo ``q``."""
    if q <= 1:
        raise ValueError("q must exceed 1")
    h = q // 2
    return (int(x) + h) % q - h


def in_zq(x: int, q: int) -> bool:
    lo, hi = zq_bounds(q)
    return lo <= x <= hi


@dataclass(frozen=True)
class ZqValue:
    """Element of Z_q in centred representation."""

    representative: int
    q: int

    def __post_init__(self):
        if self.q <= 1:
            raise ValueError("q must exceed 1")
        if not in_zq(self.representative, self.q):
            raise ValueError(f"{self.representative} is outside Z_{self.q}")

    @classmethod
    def of(cls, x: int, q: int) -> "ZqValue":
        return cls(zq_wrap(x, q), q)

    def _coerce(self, other):
        if isinstance(other, ZqValue):
            if other.q != self.q:
                raise ValueError("moduli differ")
            return other.representative
        return int(other)

    def __add__(self, other):
        return ZqValue.of(self.representative + self._coerce(other), self.q)

    __radd__ = __add__

    def __sub__(self, other):
        return ZqValue.of(self.representative - self._coerce(other), self.q)

    def __mul__(self, other):
        return ZqValue.of(self.representative * self._coerce(other), self.q)

    __rmul__ = __mul__

    def __neg__(self):
        return ZqValue.of(-self.representative, self.q)

    def __int__(self):
        return self.representative


# -- scaling profile ----------------------------------------------------------

@dataclass(frozen=True)
class ScalingProfile:
    """Scaling factors ``s0 .. s7`` and message-space cardinality ``q``.

    ``s0 .. s5`` parameterize the integer dynamic controller and must satisfy
    ``s0 = s2 s5`` and ``s1 s4 = s2 s3``; ``s6`` and ``s7`` scale FIR taps and
    inputs.
    """

    s0: float = 1.0
    s1: float = 1.0
    s2: float = 1.0
    s3: float = 1.0
    s4: float = 1.0
    s5: float = 1.0
    s6: float = 1.0
    s7: float = 1.0
    q: int = 2**20

    def __post_init__(self):
        for i, s in enumerate(self.scales):
            if not (math.isfinite(s) and s >= 1):
                raise ValueError(f"s{i} must be a finite real >= 1, got {s}")
        q = int(self.q)
        if q != self.q or q <= 1:
            raise ValueError(f"q must be an integer > 1, got {self.q!r}")
        object.__setattr__(self, "q", q)
        if not math.isclose(self.s0, self.s2 * self.s5, rel_tol=_REL_TOL):
            raise ValueError("scaling constraint s0 = s2*s5 violated")
        if not math.isclose(self.s1 * self.s4, self.s2 * self.s3, rel_tol=_REL_TOL):
            raise ValueError("scaling constraint s1*s4 = s2*s3 violated")

    @property
    def scales(self) -> tuple[float, ...]:
        return (self.s0, self.s1, self.s2, self.s3, self.s4, self.s5, self.s6, self.s7)

    @classmethod
    def uniform(cls, s: float, q: int, s6: float = 1.0, s7: float = 1.0) -> "ScalingProfile":
        """``s0 = ... = s4 = s`` and ``s5 = 1``."""
        return cls(s, s, s, s, s, 1.0, s6, s7, q)

    @classmethod
    def integer_dynamics(cls, s: float, q: int) -> "ScalingProfile":
        """``s1 = 1`` with ``s2 = s3 = s5 = s`` and ``s0 = s4 = s**2``."""
        return cls(s * s, 1.0, s, s, s * s, s, 1.0, 1.0, q)

    def to_dict(self) -> dict:
        d = {f"s{i}": float(v) for i, v in enumerate(self.scales)}
        d["q"] = str(self.q)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "ScalingProfile":
        kwargs = {f"s{i}": float(obj[f"s{i}"]) for i in range(8)}
        return cls(**kwargs, q=int(str(obj["q"])))


# -- integer controller -------------------------------------------------------

def _imatvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    if m.shape[1] == 0:
        return np.array([0] * m.shape[0], dtype=object)
    return m.dot(v)


def _abs_obj(m: np.ndarray) -> np.ndarray:
    return np.vectorize(abs, otypes=[object])(m) if m.size else m


class IntegerController:
    """Integer reformulation of a dynamic controller over Z_q.

    The state ``z`` and the output ``v`` are propagated with exact integer
    arithmetic; whenever a quantized input, a state entry or an output entry
    leaves Z_q the (sticky) ``overflowed`` flag is raised and the value is
    wrapped, which is what an encrypted implementation would silently do.
    """

    def __init__(self, sys: StateSpace, profile: ScalingProfile):
        p = profile
        self.sys = sys
        self.profile = profile
        self.q = p.q
        self.a_bar = quantize_array(sys.a, p.s1)
        self.b_bar = quantize_array(sys.b, p.s2)
        self.c_bar = quantize_array(sys.c, p.s3)
        self.d_bar = quantize_array(sys.d, p.s4)
        self.z = quantize_array(sys.x0, p.s0)
        for name in ("a_bar", "b_bar", "c_bar", "d_bar", "z"):
            for v in getattr(self, name).flat:
                if not in_zq(v, self.q):
                    raise QuantizationOverflow(f"{name} entry {v} does not fit into Z_{self.q}")
        self.k = 0
        self.overflowed = False
        self.overflow_step = None

    @property
    def n(self) -> int:
        return self.sys.n_states

    def input_scale(self, k: int | None = None) -> Fraction:
        k = self.k if k is None else k
        return Fraction(self.profile.s1) ** (k + 1) * Fraction(self.profile.s5)

    def prescale_input(self, y, k: int | None = None) -> np.ndarray:
        """Sensor-side ``round(s1^(k+1) s5 y)`` computed on the real-valued measurement."""
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != self.sys.n_inputs:
            raise DimensionError(f"input width {y.size} != {self.sys.n_inputs}")
        return quantize_array(y, self.input_scale(k))

    def _check(self, values: np.ndarray) -> np.ndarray:
        out = np.empty(values.shape, dtype=object)
        for i, v in enumerate(values):
            if not in_zq(v, self.q):
                if not self.overflowed:
                    self.overflow_step = self.k
                self.overflowed = True
            out[i] = zq_wrap(v, self.q)
        return out

    def step_quantized(self, y_q) -> tuple[np.ndarray, bool]:
        """Advance one step given an already prescaled integer input."""
        y_q = self._check(np.asarray(y_q, dtype=object).reshape(-1))
        v = self._check(_imatvec(self.c_bar, self.z) + _imatvec(self.d_bar, y_q))
        self.z = self._check(_imatvec(self.a_bar, self.z) + _imatvec(self.b_bar, y_q))
        self.k += 1
        return v, self.overflowed

    def step(self, y) -> tuple[np.ndarray, bool]:
        """Quantize the measurement ``y(k)`` and advance; returns ``(v(k), overflowed)``."""
        return self.step_quantized(self.prescale_input(y))

    def reinitialize(self, z, k: int = 0) -> None:
        """Replace the state (used by external refresh) and restart the scaling count."""
        z = np.asarray(z, dtype=object).reshape(-1)
        if z.size != self.n:
            raise DimensionError("state width mismatch")
        self.z = np.array([int(v) for v in z], dtype=object)
        self.k = k


def to_integer_controller(sys: StateSpace, profile: ScalingProfile) -> IntegerController:
    return IntegerController(sys, profile)


def step_integer(ctrl: IntegerController, y) -> tuple[np.ndarray, bool]:
    return ctrl.step(y)


def recover(v, k: int, profile: ScalingProfile, kind: str = "input") -> np.ndarray:
    """Map integers back to reals: inputs by ``s1^(k+1) s4 s5``, states by ``s0 s1^k``."""
    p = profile
    if kind == "input":
        scale = Fraction(p.s1) ** (k + 1) * Fraction(p.s4) * Fraction(p.s5)
    elif kind == "state":
        scale = Fraction(p.s0) * Fraction(p.s1) ** k
    else:
        raise ValueError(f"kind must be 'input' or 'state', got {kind!r}")
    return np.array([float(Fraction(int(x)) / scale) for x in np.asarray(v, dtype=object).reshape(-1)])


class RecoveryBound:
    """Running componentwise bound on the recovery error of an :class:`IntegerController`.

    Feed it the recovered state and the real input of every step (before the
    controller advances); it returns the bound on ``|u_recovered - u_exact|``.
    """

    def __init__(self, ctrl: IntegerController):
        p = ctrl.profile
        self.p = p
        self.abs_a = np.abs(ctrl.sys.a)
        self.abs_b = np.abs(ctrl.sys.b)
        self.abs_c = np.abs(ctrl.sys.c)
        self.abs_d = np.abs(ctrl.sys.d)
        self.l = ctrl.sys.n_inputs
        self.state = np.full(ctrl.n, 0.5 / p.s0)

    def step(self, x_hat, y, k: int) -> np.ndarray:
        p = self.p
        x1 = float(np.abs(x_hat).sum())
        y1 = float(np.abs(y).sum())
        growth = float(p.s1) ** (k + 1) * p.s5
        u_bound = (
            self.abs_c @ self.state
            + x1 / (2 * p.s3)
            + y1 / (2 * p.s4)
            + (self.abs_d.sum(axis=1) + self.l / (2 * p.s4)) / (2 * growth)
        )
        self.state = (
            self.abs_a @ self.state
            + x1 / (2 * p.s1)
            + y1 / (2 * p.s2)
            + (self.abs_b.sum(axis=1) / p.s5 + self.l / (2 * p.s0)) / (2 * growth)
        )
        return u_bound


def overflow_horizon(ctrl: IntegerController, y_max: float, max_steps: int = 10_000) -> float:
    """Number of further steps guaranteed free of overflow for ``|y|_inf <= y_max``.

    Magnitudes of the prescaled input, the output and the next state are bounded
    through exact integer powers of the quantized state matrix.  Returns
    :data:`UNBOUNDED` when the bound provably never leaves Z_q (e.g. ``s1 = 1``
    with nilpotent dynamics) and ``max_steps`` if the search is cut off.
    """
    if y_max < 0:
        raise ValueError("y_max must be non-negative")
    hi = zq_bounds(ctrl.q)[1]
    n = ctrl.n
    k0 = ctrl.k
    s1 = Fraction(ctrl.profile.s1)
    z0 = np.array([abs(v) for v in ctrl.z], dtype=object)
    abs_b = _abs_obj(ctrl.b_bar)
    abs_c = _abs_obj(ctrl.c_bar)
    abs_d = _abs_obj(ctrl.d_bar)
    ones_l = np.array([1] * ctrl.sys.n_inputs, dtype=object)

    def y_bound(k):
        return round_half_away(ctrl.input_scale(k0 + k) * Fraction(float(y_max)))

    if any(v > hi for v in z0):
        return 0

    # power = A_bar^k; terms[j] = |A_bar^j B_bar| 1  (input response columns)
    power = np.identity(n, dtype=int).astype(object) if n else np.zeros((0, 0), dtype=object)
    terms: list[np.ndarray] = []
    z_bound = z0
    constant_input = s1 == 1
    cumulative = np.array([0] * n, dtype=object)
    nilpotent_at = None
    for k in range(max_steps):
        yk = y_bound(k)
        v_bound = _imatvec(abs_c, z_bound) + _imatvec(abs_d, ones_l) * yk
        if yk > hi or any(v > hi for v in v_bound):
            return k
        # z(k+1) = A^(k+1) z0 + sum_j A^j B y(k-j)
        terms.append(_imatvec(_abs_obj(power.dot(ctrl.b_bar)) if n else np.zeros((0, 0), dtype=object), ones_l))
        power = power.dot(ctrl.a_bar) if n else power
        z_free = _imatvec(_abs_obj(power), z0)
        if constant_input:
            cumulative = cumulative + terms[-1] * yk
            z_next = z_free + cumulative
        else:
            z_next = z_free.copy()
            for j, t in enumerate(terms):
                z_next = z_next + t * y_bound(k - j)
        if any(v > hi for v in z_next):
            return k
        z_bound = z_next
        if nilpotent_at is None and not power.any():
            nilpotent_at = k
        if constant_input and nilpotent_at is not None:
            # all further bounds repeat the current ones exactly
            v_next = _imatvec(abs_c, z_next) + _imatvec(abs_d, ones_l) * yk
            return k + 1 if any(v > hi for v in v_next) else UNBOUNDED
        if not constant_input and nilpotent_at is not None and yk == 0 and y_max == 0:
            return UNBOUNDED
    return max_steps
