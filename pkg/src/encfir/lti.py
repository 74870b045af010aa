"""Dense discrete-time LTI systems.

A system is stored as ``x(k+1) = A x(k) + B y(k)``, ``u(k) = C x(k) + D y(k)``
with ``y`` the input and ``u`` the output, which is the controller-centric
naming used throughout the package.  Plants use the same container.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHUR_TOL = 1e-9


class DimensionError(ValueError):
    pass


class UnstableSystemError(ValueError):
    pass


def _as_matrix(x, name) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be two-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StateSpace:
    """Discrete-time state-space system (A, B, C, D) with initial state x0.

    Systems without states (pure gains) have ``A`` of shape ``(0, 0)``.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    x0: np.ndarray = None
    dt: float = 1.0

    def __post_init__(self):
        a = _as_matrix(self.a, "a") if np.size(self.a) else np.zeros((0, 0))
        n = a.shape[0]
        d = _as_matrix(self.d, "d")
        m, l = d.shape
        b = _as_matrix(self.b, "b") if n else np.zeros((0, l))
        c = _as_matrix(self.c, "c") if n else np.zeros((m, 0))
        if a.shape != (n, n):
            raise DimensionError(f"a must be square, got {a.shape}")
        if b.shape != (n, l):
            raise DimensionError(f"b has shape {b.shape}, expected {(n, l)}")
        if c.shape != (m, n):
            raise DimensionError(f"c has shape {c.shape}, expected {(m, n)}")
        x0 = np.zeros(n) if self.x0 is None else np.array(self.x0, dtype=float).reshape(-1)
        if x0.shape != (n,):
            raise DimensionError(f"x0 has length {x0.size}, expected {n}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for arr in (a, b, c, x0):
            arr.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x0", x0)

    @property
    def n_states(self) -> int:
        return self.a.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.d.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.d.shape[0]

    def with_x0(self, x0) -> "StateSpace":
        return StateSpace(self.a, self.b, self.c, self.d, x0, self.dt)

    @classmethod
    def gain(cls, d, dt: float = 1.0) -> "StateSpace":
        """Static gain ``u = D y`` without internal states."""
        d = _as_matrix(d, "d")
        return cls(np.zeros((0, 0)), np.zeros((0, d.shape[1])), np.zeros((d.shape[0], 0)), d, dt=dt)


@dataclass(frozen=True)
class SignalTrace:
    """Equally spaced samples of a vector signal, one row per time step."""

    samples: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim == 1:
            s = s.reshape(-1, 1)
        if s.ndim != 2:
            raise DimensionError("samples must be a sequence of vectors")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


def _input_array(inputs, width: int) -> np.ndarray:
    y = inputs.samples if isinstance(inputs, SignalTrace) else np.array(inputs, dtype=float)
    if y.ndim == 1:
        y = y.reshape(-1, 1) if width == 1 else y.reshape(1, -1)
    if y.ndim != 2 or y.shape[1] != width:
        raise DimensionError(f"inputs must have width {width}, got shape {y.shape}")
    return y


def simulate(sys: StateSpace, inputs, steps: int | None = None):
    """Run the state recursion for ``steps`` samples.

    Returns ``(states, outputs)`` as :class:`SignalTrace`; ``states`` holds
    ``x(0) .. x(steps)`` (one more row than ``outputs``).
    """
    y = _input_array(inputs, sys.n_inputs)
    if steps is None:
        steps = y.shape[0]
    if steps > y.shape[0]:
        raise DimensionError(f"steps={steps} exceeds input length {y.shape[0]}")
    x = np.empty((steps + 1, sys.n_states))
    u = np.empty((steps, sys.n_outputs))
    x[0] = sys.x0
    for k in range(steps):
        u[k] = sys.c @ x[k] + sys.d @ y[k]
        x[k + 1] = sys.a @ x[k] + sys.b @ y[k]
    return SignalTrace(x, sys.dt), SignalTrace(u, sys.dt)


def explicit_output(sys: StateSpace, inputs, k: int) -> np.ndarray:
    """Output at step ``k`` from the convolution formula, without recursion."""
    y = _input_array(inputs, sys.n_inputs)
    if not 0 <= k < y.shape[0]:
        raise DimensionError(f"k={k} outside input range of length {y.shape[0]}")
    out = sys.d @ y[k]
    if sys.n_states == 0:
        return out
    ca = sys.c.copy()  # C A^j
    for j in range(k):
        out = out + ca @ sys.b @ y[k - 1 - j]
        ca = ca @ sys.a
    return out + ca @ sys.x0


def spectral_radius(a) -> float:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"spectral radius needs a square matrix, got {a.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def is_schur(a, tol: float = SCHUR_TOL) -> bool:
    """True iff every eigenvalue lies strictly inside the unit circle (by ``tol``)."""
    return spectral_radius(a) < 1.0 - tol


class IntegerStability(enum.Enum):
    STABLE_NILPOTENT = "stable_nilpotent"
    UNSTABLE = "unstable"


def integer_schur_check(a) -> IntegerStability:
    """Exact stability test for integer state matrices.

    An integer matrix is Schur stable only if all its eigenvalues vanish,
    i.e. iff it is nilpotent, which is decided by ``a**n == 0`` in exact
    integer arithmetic.
    """
    arr = np.asarray(a)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"integer_schur_check needs a square matrix, got {arr.shape}")
    rows = arr.tolist()
    for row in rows:
        for v in row:
            if isinstance(v, float):
                if not (math.isfinite(v) and v == int(v)):
                    raise ValueError(f"non-integer entry {v!r}")
            elif not isinstance(v, (int, np.integer)):
                raise ValueError(f"non-integer entry {v!r}")
    m = np.array([[int(v) for v in row] for row in rows], dtype=object).reshape(arr.shape)
    n = m.shape[0]
    if n == 0:
        return IntegerStability.STABLE_NILPOTENT
    p = m.copy()
    for _ in range(n - 1):
        p = p.dot(m)
        if not p.any():
            break
    return IntegerStability.UNSTABLE if p.any() else IntegerStability.STABLE_NILPOTENT


def markov_parameters(sys: StateSpace, count: int) -> list[np.ndarray]:
    """Return ``[D, CB, CAB, ..., C A^(count-1) B]``."""
    if count < 0:
        raise ValueError("count must be non-negative")
    out = [sys.d.copy()]
    ca = sys.c
    for _ in range(count):
        out.append(ca @ sys.b)
        ca = ca @ sys.a
    return out


def impulse_response(sys: StateSpace, count: int) -> list[np.ndarray]:
    """Impulse response samples 0..count by simulation, one input channel at a time."""
    sys0 = sys.with_x0(np.zeros(sys.n_states))
    cols = []
    for i in range(sys.n_inputs):
        y = np.zeros((count + 1, sys.n_inputs))
        y[0, i] = 1.0
        cols.append(simulate(sys0, y)[1].samples)
    return [np.column_stack([c[j] for c in cols]) for j in range(count + 1)]


def frequency_response(sys: StateSpace, theta) -> np.ndarray:
    """Transfer matrix ``C (e^{i theta} I - A)^{-1} B + D`` for every angle in ``theta``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    g = np.broadcast_to(sys.d.astype(complex), (theta.size,) + sys.d.shape).copy()
    n = sys.n_states
    if n:
        z = np.exp(1j * theta)[:, None, None]
        lhs = z * np.eye(n) - sys.a
        g += sys.c @ np.linalg.solve(lhs, np.broadcast_to(sys.b, (theta.size,) + sys.b.shape))
    return g


def _sigma_max(sys: StateSpace, theta) -> np.ndarray:
    g = frequency_response(sys, theta)
    if g.shape[1] == 0 or g.shape[2] == 0:
        return np.zeros(g.shape[0])
    return np.linalg.svd(g, compute_uv=False)[:, 0]


def _golden_max(f, lo, hi, iters=60):
    invphi = (math.sqrt(5) - 1) / 2
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc > fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = f(d)
    return max(fc, fd)


def hinf_norm(sys: StateSpace, grid_points: int = 512, refine_peaks: int = 5) -> float:
    """Peak gain over the unit circle, measured on a frequency grid.

    The grid ``linspace(0, pi, grid_points)`` is evaluated densely and the
    ``refine_peaks`` largest local maxima are polished by golden-section
    search inside their neighbouring grid cells.  The result is a lower bound
    on the true norm.
    """
    if grid_points < 64:
        raise ValueError("grid_points must be at least 64")
    if sys.n_states and not is_schur(sys.a):
        raise UnstableSystemError("H-infinity norm is only defined here for Schur stable systems")
    theta = np.linspace(0.0, math.pi, grid_points)
    vals = _sigma_max(sys, theta)
    best = float(vals.max())
    if sys.n_states == 0 or best == 0.0:
        return best
    # local maxima including the end points
    padded = np.concatenate(([-np.inf], vals, [-np.inf]))
    peaks = np.flatnonzero((padded[1:-1] >= padded[:-2]) & (padded[1:-1] >= padded[2:]))
    peaks = peaks[np.argsort(vals[peaks])[::-1][:refine_peaks]]
    f = lambda t: float(_sigma_max(sys, [t])[0])
    for i in peaks:
        lo = theta[max(i - 1, 0)]
        hi = theta[min(i + 1, grid_points - 1)]
        best = max(best, _golden_max(f, lo, hi))
    return best


def series(first: StateSpace, second: StateSpace) -> StateSpace:
    """Cascade: the output of ``first`` drives ``second``."""
    if first.n_outputs != second.n_inputs:
        raise DimensionError("series: output width of first != input width of second")
    n1, n2 = first.n_states, second.n_states
    a = np.block([
        [first.a, np.zeros((n1, n2))],
        [second.b @ first.c, second.a],
    ])
    b = np.vstack([first.b, second.b @ first.d])
    c = np.hstack([second.d @ first.c, second.c])
    d = second.d @ first.d
    return StateSpace(a, b, c, d, np.concatenate([first.x0, second.x0]), first.dt)


def parallel_difference(left: StateSpace, right: StateSpace) -> StateSpace:
    """System with output ``left(y) - right(y)`` for a shared input ``y``."""
    if left.n_inputs != right.n_inputs or left.n_outputs != right.n_outputs:
        raise DimensionError("parallel_difference: dimension mismatch")
    n1, n2 = left.n_states, right.n_states
    a = np.block([[left.a, np.zeros((n1, n2))], [np.zeros((n2, n1)), right.a]])
    b = np.vstack([left.b, right.b])
    c = np.hstack([left.c, -right.c])
    return StateSpace(a, b, c, left.d - right.d, np.concatenate([left.x0, right.x0]), left.dt)


def random_stable(rng: np.random.Generator, n: int, l: int = 1, m: int = 1, radius: float = 0.9) -> StateSpace:
    """Random system whose state matrix has spectral radius ``radius``."""
    a = rng.standard_normal((n, n))
    rho = spectral_radius(a)
    if rho > 0:
        a *= radius / rho
    return StateSpace(a, rng.standard_normal((n, l)), rng.standard_normal((m, n)), rng.standard_normal((m, l)))


# -- JSON model files -------------------------------------------------------

def model_to_dict(sys: StateSpace) -> dict:
    def rows(x):
        return [list(map(float, r)) for r in np.asarray(x)]
    return {
        "a": rows(sys.a),
        "b": rows(sys.b),
        "c": rows(sys.c),
        "d": rows(sys.d),
        "x0": list(map(float, sys.x0)),
        "dt": float(sys.dt),
    }


def _matrix_from_rows(rows, shape_hint):
    if len(rows) == 0:
        return np.zeros(shape_hint)
    return np.array(rows, dtype=float)


def model_from_dict(obj: dict) -> StateSpace:
    missing = {"a", "b", "c", "d", "x0", "dt"} - set(obj)
    if missing:
        raise KeyError(f"model is missing keys: {sorted(missing)}")
    d = np.array(obj["d"], dtype=float)
    n = len(obj["x0"])
    m, l = d.shape
    return StateSpace(
        _matrix_from_rows(obj["a"], (n, n)),
        _matrix_from_rows(obj["b"], (n, l)),
        _matrix_from_rows(obj["c"], (m, n)) if n else np.zeros((m, 0)),
        d,
        obj["x0"],
        float(obj["dt"]),
    )


def save_model(sys: StateSpace, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(sys), indent=2))


def load_model(path) -> StateSpace:
    return model_from_dict(json.loads(Path(path).read_text()))
