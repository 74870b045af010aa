"""FIR approximations of dynamic controllers.

Two designs are provided: the rectangular window (truncated Markov
parameters) and an H-infinity optimal design that solves the bounded-real
LMI for the weighted approximation error at a fixed level ``gamma``.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from . import lmi
from .lti import (
    DimensionError,
    StateSpace,
    UnstableSystemError,
    hinf_norm,
    is_schur,
    markov_parameters,
)


class NotSchurWarning(UserWarning):
    pass


class RegularizedInverseWarning(UserWarning):
    pass


class InfeasibleDesign(ValueError):
    """The LMI has no solution at the requested gamma."""


@dataclass(frozen=True)
class FirFilter:
    """Taps ``F_0 .. F_N`` of ``u(k) = sum_j F_j y(k-j)``."""

    taps: tuple

    def __post_init__(self):
        taps = tuple(np.array(t, dtype=float, ndmin=2) for t in self.taps)
        if not taps:
            raise ValueError("a filter needs at least one tap")
        shape = taps[0].shape
        for t in taps:
            if t.shape != shape or t.ndim != 2:
                raise DimensionError("all taps must share one m x l shape")
            t.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def order(self) -> int:
        return len(self.taps) - 1

    @property
    def n_inputs(self) -> int:
        return self.taps[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.taps[0].shape[0]

    def to_dict(self) -> dict:
        return {"order": self.order, "taps": [t.tolist() for t in self.taps]}

    @classmethod
    def from_dict(cls, obj: dict) -> "FirFilter":
        f = cls(tuple(obj["taps"]))
        if int(obj["order"]) != f.order:
            raise ValueError(f"order {obj['order']} does not match {len(f.taps)} taps")
        return f

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "FirFilter":
        return cls.from_dict(json.loads(Path(path).read_text()))


class InputHistory:
    """The ``N + 1`` most recent inputs, newest first; older samples read as zero."""

    def __init__(self, order: int, width: int):
        self.width = width
        self._buf = deque([np.zeros(width) for _ in range(order + 1)], maxlen=order + 1)

    def push(self, y) -> None:
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != self.width:
            raise DimensionError(f"input width {y.size} != {self.width}")
        self._buf.appendleft(y)

    def __getitem__(self, j: int) -> np.ndarray:
        """``y(k - j)``."""
        return self._buf[j]

    def __len__(self):
        return len(self._buf)


@dataclass
class OpCount:
    multiplications: int = 0
    additions: int = 0

    def __add__(self, other):
        return OpCount(self.multiplications + other.multiplications, self.additions + other.additions)


def _counted_matvec(f: np.ndarray, y: np.ndarray, counter: OpCount | None) -> np.ndarray:
    if counter is not None:
        m, l = f.shape
        counter.multiplications += m * l
        counter.additions += m * (l - 1)
    return f @ y


# -- window design ------------------------------------------------------------

def window_fir(ctrl: StateSpace, order: int) -> FirFilter:
    """``F_0 = D`` and ``F_j = C A^(j-1) B`` for ``j = 1..N``."""
    if order < 0:
        raise ValueError("order must be non-negative")
    if ctrl.n_states and not is_schur(ctrl.a):
        warnings.warn("controller state matrix is not Schur stable; the truncated tail does not vanish",
                      NotSchurWarning, stacklevel=2)
    return FirFilter(tuple(markov_parameters(ctrl, order)))


def truncation_indicator(ctrl: StateSpace, order: int) -> float:
    """Spectral norm of ``C A^N``, the gain of the neglected tail."""
    if ctrl.n_states == 0:
        return 0.0
    return float(np.linalg.norm(ctrl.c @ np.linalg.matrix_power(ctrl.a, order), 2))


def fir_to_statespace(f: FirFilter) -> StateSpace:
    """Shift-register realization with state ``(y(k-1), ..., y(k-N))``.

    For ``N = 0`` the result is the stateless gain ``F_0``.
    """
    n_ord, l = f.order, f.n_inputs
    if n_ord == 0:
        return StateSpace.gain(f.taps[0])
    n = n_ord * l
    a = np.zeros((n, n))
    a[l:, :-l] = np.eye(n - l)
    b = np.zeros((n, l))
    b[:l] = np.eye(l)
    c = np.hstack(f.taps[1:])
    return StateSpace(a, b, c, f.taps[0])


def evaluate_fir(f: FirFilter, h: InputHistory, counter: OpCount | None = None) -> np.ndarray:
    if h.width != f.n_inputs:
        raise DimensionError("history width does not match the filter")
    out = np.zeros(f.n_outputs)
    for j, tap in enumerate(f.taps):
        out = out + _counted_matvec(tap, h[j] if j < len(h) else np.zeros(h.width), counter)
    return out


def precompute_split(f: FirFilter, h: InputHistory, counter: OpCount | None = None):
    """Split the FIR sum into the online term ``F_0 y(k)`` and the rest.

    The deferred part only uses past inputs and may be evaluated between
    samples.  ``counter`` (if given) records the operations of the online part,
    including the single addition of each output component to the deferred sum.
    """
    deferred = np.zeros(f.n_outputs)
    for j in range(1, f.order + 1):
        deferred = deferred + f.taps[j] @ h[j]
    immediate = _counted_matvec(f.taps[0], h[0], counter)
    if counter is not None:
        counter.additions += f.n_outputs
    return immediate, deferred


# -- operation counts ------------------------------------------------------------

def opcounts(order: int, l: int, m: int, n: int) -> tuple[OpCount, OpCount]:
    """Per-step operations of the integer FIR sum versus the integer IIR recursion."""
    if min(l, m, n) < 1 or order < 0:
        raise ValueError("dimensions must be positive")
    fir = OpCount(l * m * (order + 1), m * (order + l - 1))
    iir = OpCount((l + n) * (m + n), (l + n) * (m + n - 1))
    return fir, iir


def efficient_order_bound(l: int, m: int, n: int) -> float:
    """FIR orders strictly below this value need fewer operations than the IIR form."""
    if min(l, m, n) < 1:
        raise ValueError("dimensions must be positive")
    return min((l * n + m * n + n * n) / (l * m), (l * n + n * n - l - n) / m + n + 1)


# -- weights and error system ------------------------------------------------------

def causal_inverse_weight(ctrl: StateSpace, ridge: float = 1e-6) -> StateSpace:
    """State-space inverse ``(A - B D^-1 C, B D^-1, -D^-1 C, D^-1)``.

    A singular or non-square ``D`` is replaced by the ridge-regularized
    pseudo-inverse ``D^T (D D^T + ridge I)^-1``; a
    :class:`RegularizedInverseWarning` is emitted in that case.
    """
    d = ctrl.d
    m, l = d.shape
    d_inv = None
    if m == l:
        try:
            if np.linalg.cond(d) < 1e12:
                d_inv = np.linalg.inv(d)
        except np.linalg.LinAlgError:
            d_inv = None
    if d_inv is None:
        warnings.warn("feedthrough is singular or non-square; using a regularized pseudo-inverse",
                      RegularizedInverseWarning, stacklevel=2)
        if m <= l:
            d_inv = d.T @ np.linalg.inv(d @ d.T + ridge * np.eye(m))
        else:
            d_inv = np.linalg.inv(d.T @ d + ridge * np.eye(l)) @ d.T
    a = ctrl.a - ctrl.b @ d_inv @ ctrl.c
    return StateSpace(a, ctrl.b @ d_inv, -d_inv @ ctrl.c, d_inv, dt=ctrl.dt)


def identity_weight(width: int) -> StateSpace:
    return StateSpace.gain(np.eye(width))


def _check_weight(iir: StateSpace, weight: StateSpace):
    if weight.n_outputs != iir.n_inputs:
        raise DimensionError("weight output width must equal the controller input width")
    for name, sys in (("controller", iir), ("weight", weight)):
        if sys.n_states and not is_schur(sys.a):
            raise UnstableSystemError(f"{name} state matrix is not Schur stable")


def assemble_error_system(iir: StateSpace, f: FirFilter, weight: StateSpace) -> StateSpace:
    """Weighted error ``e = (FIR - IIR) G_w w`` with state ``(x_w, x, x_f)``."""
    _check_weight(iir, weight)
    if (f.n_outputs, f.n_inputs) != iir.d.shape:
        raise DimensionError("filter taps do not match the controller dimensions")
    fs = fir_to_statespace(f)
    aw, bw, cw, dw = weight.a, weight.b, weight.c, weight.d
    nw, n, nf = weight.n_states, iir.n_states, fs.n_states
    a = np.block([
        [aw, np.zeros((nw, n)), np.zeros((nw, nf))],
        [iir.b @ cw, iir.a, np.zeros((n, nf))],
        [fs.b @ cw, np.zeros((nf, n)), fs.a],
    ])
    b = np.vstack([bw, iir.b @ dw, fs.b @ dw])
    c = np.hstack([(fs.d - iir.d) @ cw, -iir.c, fs.c])
    d = (fs.d - iir.d) @ dw
    return StateSpace(a, b, c, d, dt=iir.dt)


# -- H-infinity design ---------------------------------------------------------------

@dataclass
class HinfDesign:
    filter: FirFilter
    gamma: float
    certificate: np.ndarray  # P of the bounded-real LMI
    lmi_max_eig: float  # largest eigenvalue of the gamma-normalized LMI
    audit: float  # grid-measured H-infinity norm of the error system
    newton_steps: int = 0
    solver_x: np.ndarray = field(default=None, repr=False)


class _ErrorLmi:
    """Bounded-real LMI of the error system, affine in ``(P/gamma, C_f, D_f)``."""

    def __init__(self, iir: StateSpace, weight: StateSpace, order: int):
        _check_weight(iir, weight)
        self.iir, self.weight, self.order = iir, weight, order
        m, l = iir.d.shape
        self.m, self.l = m, l
        zero = FirFilter(tuple(np.zeros((m, l)) for _ in range(order + 1)))
        e0 = assemble_error_system(iir, zero, weight)
        self.ae, self.be = e0.a, e0.b
        self.ce0, self.de0 = e0.c, e0.d
        self.ne = e0.n_states
        self.nw = e0.n_inputs
        self.n_p = self.ne * (self.ne + 1) // 2
        self.n_cf = m * l * order
        self.n_df = m * l
        self.n_vars = self.n_p + self.n_cf + self.n_df
        self.p_basis = lmi.sym_basis(self.ne)
        # linear maps of the filter parameters into (C_e, D_e)
        cw, dw = weight.c, weight.d
        nw_states, n = weight.n_states, iir.n_states
        self.cf_maps = []
        for idx in range(self.n_cf):
            cf = np.zeros(self.n_cf)
            cf[idx] = 1.0
            ce = np.zeros_like(self.ce0)
            ce[:, nw_states + n:] = cf.reshape(m, l * order)
            self.cf_maps.append((ce, np.zeros_like(self.de0)))
        for idx in range(self.n_df):
            df = np.zeros(self.n_df)
            df[idx] = 1.0
            df = df.reshape(m, l)
            ce = np.zeros_like(self.ce0)
            ce[:, :nw_states] = df @ cw
            self.cf_maps.append((ce, df @ dw))

    def split(self, x):
        p = lmi.sym_from_vector(x[: self.n_p], self.ne)
        cf = x[self.n_p: self.n_p + self.n_cf].reshape(self.m, self.l * self.order)
        df = x[self.n_p + self.n_cf:].reshape(self.m, self.l)
        return p, cf, df

    def taps_of(self, x) -> FirFilter:
        _, cf, df = self.split(x)
        return FirFilter((df,) + tuple(cf[:, j * self.l:(j + 1) * self.l] for j in range(self.order)))

    def vector_of(self, f: FirFilter, p: np.ndarray) -> np.ndarray:
        pv = p[np.triu_indices(self.ne)]
        cf = np.hstack(f.taps[1:]).reshape(-1) if f.order else np.zeros(0)
        return np.concatenate([pv, cf, f.taps[0].reshape(-1)])

    def matrices(self, gamma: float):
        """Constant term and basis of the LMI divided by gamma."""
        ne, nw, me = self.ne, self.nw, self.m
        a, b = self.ae, self.be
        size = ne + nw + me

        def block(p, ce, de, const):
            out = np.zeros((size, size))
            out[:ne, :ne] = a.T @ p @ a - p
            out[:ne, ne:ne + nw] = a.T @ p @ b
            out[ne:ne + nw, :ne] = b.T @ p @ a
            out[ne:ne + nw, ne:ne + nw] = b.T @ p @ b - (np.eye(nw) if const else 0)
            out[ne + nw:, :ne] = ce / gamma
            out[:ne, ne + nw:] = ce.T / gamma
            out[ne + nw:, ne:ne + nw] = de / gamma
            out[ne:ne + nw, ne + nw:] = de.T / gamma
            if const:
                out[ne + nw:, ne + nw:] = -np.eye(me)
            return out

        zp = np.zeros((ne, ne))
        f0 = block(zp, self.ce0, self.de0, True)
        basis = [block(pb, np.zeros_like(self.ce0), np.zeros_like(self.de0), False) for pb in self.p_basis]
        basis += [block(zp, ce, de, False) for ce, de in self.cf_maps]
        g_basis = np.concatenate([self.p_basis, np.zeros((self.n_cf + self.n_df, ne, ne))])
        return f0, np.array(basis).reshape(-1, size, size), g_basis


def _initial_point(problem: _ErrorLmi, gamma: float, start: FirFilter | None):
    """Start taps plus the solution of the error system Lyapunov equation with unit right-hand side."""
    if start is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotSchurWarning)
            start = window_fir(problem.iir, problem.order)
    err = assemble_error_system(problem.iir, start, problem.weight)
    q = np.eye(problem.ne)
    p = solve_discrete_lyapunov(err.a.T, q) if problem.ne else np.zeros((0, 0))
    return problem.vector_of(start, 0.5 * (p + p.T))


def hinf_fir_design(
    iir: StateSpace,
    weight: StateSpace,
    order: int,
    gamma: float,
    start: FirFilter | None = None,
    audit_grid: int = 2048,
) -> HinfDesign:
    """FIR filter of order ``N`` whose weighted error has H-infinity norm below ``gamma``.

    Raises :class:`InfeasibleDesign` if the LMI is infeasible at ``gamma`` and
    :class:`encfir.lmi.SolverError` if the barrier method does not converge.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    problem = _ErrorLmi(iir, weight, order)
    f0, basis, g_basis = problem.matrices(gamma)
    x0 = _initial_point(problem, gamma, start)
    # P/gamma grows like 1/gamma**2 along unreachable error directions, so the ball must too
    radius = 1e4 * (1.0 + np.linalg.norm(x0)) / min(1.0, gamma) ** 2
    res = lmi.solve_lmi(f0, basis, np.zeros((problem.ne, problem.ne)), g_basis, x0=x0, radius=radius)
    if not res.feasible:
        raise InfeasibleDesign(
            f"bounded-real LMI infeasible at gamma={gamma:g} (lower bound {res.lower_bound:.3g})")
    filt = problem.taps_of(res.x)
    p = gamma * problem.split(res.x)[0]
    audit = hinf_norm(assemble_error_system(iir, filt, weight), audit_grid)
    return HinfDesign(filt, gamma, p, res.max_eig, audit, res.newton_steps, res.x)


def default_gamma_cap(iir: StateSpace, weight: StateSpace) -> float:
    """Norm of the weighted controller itself (the error of the zero filter), inflated by 10%."""
    m, l = iir.d.shape
    zero = FirFilter((np.zeros((m, l)),))
    return 1.1 * max(hinf_norm(assemble_error_system(iir, zero, weight), 1024), 1e-12)


def minimize_gamma(
    iir: StateSpace,
    weight: StateSpace,
    order: int,
    cap: float | None = None,
    rel_width: float = 1e-3,
    floor_ratio: float = 1e-6,
) -> tuple[float, HinfDesign]:
    """Smallest feasible gamma by geometric bisection on ``[floor_ratio * cap, cap]``.

    The sequence of tested levels depends only on ``cap``, so results for
    different orders are directly comparable.
    """
    if cap is None:
        cap = default_gamma_cap(iir, weight)

    def attempt(g, start):
        try:
            return hinf_fir_design(iir, weight, order, g, start=start)
        except (InfeasibleDesign, lmi.SolverError):
            # an undecided level counts as infeasible; bisection then stays conservative
            return None

    best = attempt(cap, None)
    if best is None:
        raise InfeasibleDesign(f"no feasible gamma below the cap {cap:g}")
    lo = cap * floor_ratio
    low_design = attempt(lo, best.filter)
    if low_design is not None:
        return lo, low_design
    hi = cap
    while hi / lo > 1.0 + rel_width:
        mid = math.sqrt(lo * hi)
        d = attempt(mid, best.filter)
        if d is None:
            lo = mid
        else:
            hi, best = mid, d
    return hi, best
