"""Homomorphic evaluation of a quantized FIR control law.

The integer law is ``v(k) = sum_j round(s6 F_j) round(s7 y(k-j))`` and the
control input is recovered as ``u(k) ~ v(k) / (s6 s7)`` with the same scaling
at every step.  Each scalar product of a tap entry and an input entry is one
homomorphic multiplication, so the circuit has depth 1 whatever the order.

Two modes exist.  In ``partial`` mode the taps are plaintexts and products use
``mul_plain``; in ``full`` mode the taps are encrypted once at session start
and products use ciphertext multiplication with one relinearization per
output component.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .fir import FirFilter, InputHistory
from .he_backend import BfvBackend, HeParams, MockBackend
from .lti import DimensionError
from .quantizer import quantize, quantize_array

MODES = ("partial", "full")


class HeadroomError(ValueError):
    """The worst-case FIR sum does not fit into the plaintext space."""

    def __init__(self, bound: int, limit: float):
        super().__init__(f"worst-case |v| = {bound} does not stay below t/2 = {limit:g}")
        self.bound = bound
        self.limit = limit


def headroom_bound(int_taps, l: int, y_int_max: int) -> int:
    """``(N+1) l max|round(s6 F)| max|round(s7 y)|``."""
    n_taps = len(int_taps)
    tap_max = max((abs(int(v)) for t in int_taps for v in np.asarray(t).reshape(-1)), default=0)
    return n_taps * l * tap_max * y_int_max


def exact_headroom_bound(int_taps, y_int_max) -> int:
    """Exact worst case ``max_i sum_j sum_c |round(s6 F_j)[i, c]| y_c`` for ``|round(s7 y_c)| <= y_c``."""
    y_int_max = [int(v) for v in y_int_max]
    m = np.asarray(int_taps[0]).shape[0]
    return max(sum(abs(int(t[i, c])) * y for t in int_taps for c, y in enumerate(y_int_max))
               for i in range(m))


HEADROOM_RULES = ("product", "exact")


def _y_bounds(y_max, l: int) -> np.ndarray:
    y = np.abs(np.asarray(y_max, dtype=float).reshape(-1))
    if y.size == 1:
        y = np.full(l, y[0])
    if y.size != l:
        raise DimensionError(f"y_max has {y.size} entries for {l} inputs")
    return y


@dataclass
class EncryptedTaps:
    """Tap payloads ``round(s6 F_j)``, one per scalar entry (``payloads[j][i][c]``)."""

    mode: str
    payloads: list
    int_taps: list | None  # object arrays of Python ints; None on the evaluating side in full mode
    s6: float
    s7: float
    y_max: object  # scalar or per-input bound

    @property
    def order(self) -> int:
        return len(self.payloads) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.payloads[0]), len(self.payloads[0][0])


def encode_taps(f: FirFilter, s6: float, mode: str, backend, s7: float, y_max,
                headroom: str = "product") -> EncryptedTaps:
    """Quantize and encode (or encrypt) the taps after checking the headroom rule.

    ``y_max`` bounds ``|y|`` (scalar or one entry per input).  The default
    ``product`` rule requires ``(N+1) l max|round(s6 F)| max|round(s7 y_max)|
    < t/2``; the ``exact`` rule uses the attainable worst case
    ``sum_j sum_c |round(s6 F_j)| round(s7 y_max_c)``, which never exceeds
    the product form.  Raises :class:`HeadroomError` with the computed bound.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if headroom not in HEADROOM_RULES:
        raise ValueError(f"headroom rule must be one of {HEADROOM_RULES}")
    int_taps = [quantize_array(t, s6) for t in f.taps]
    y_int = [abs(quantize(v, s7)) for v in _y_bounds(y_max, f.n_inputs)]
    if headroom == "product":
        bound = headroom_bound(int_taps, f.n_inputs, max(y_int))
    else:
        bound = exact_headroom_bound(int_taps, y_int)
    limit = backend.params.t / 2
    if bound >= limit:
        raise HeadroomError(bound, limit)
    m, l = f.n_outputs, f.n_inputs
    payloads = []
    for t in int_taps:
        rows = []
        for i in range(m):
            if mode == "partial":
                rows.append([backend.encode(int(t[i, c])) for c in range(l)])
            else:
                rows.append([backend.encrypt(int(t[i, c])) for c in range(l)])
        payloads.append(rows)
    return EncryptedTaps(mode, payloads, int_taps, s6, s7, y_max)


def decode_taps(taps: EncryptedTaps, backend) -> list:
    """Integer tap matrices read back from the payloads (decrypting in full mode)."""
    out = []
    for rows in taps.payloads:
        mat = np.empty((len(rows), len(rows[0])), dtype=object)
        for i, row in enumerate(rows):
            for c, p in enumerate(row):
                mat[i, c] = p.value if taps.mode == "partial" else backend.decrypt_value(p)
        out.append(mat)
    return out


def quantize_input(y, s7: float) -> np.ndarray:
    """Sensor-side rounding ``round(s7 y)`` before encryption."""
    return quantize_array(np.asarray(y, dtype=float).reshape(-1), s7)


def encrypt_input(backend, y, s7: float) -> list:
    return [backend.encrypt(int(v)) for v in quantize_input(y, s7)]


class EncryptedHistory:
    """The ``N + 1`` most recent encrypted inputs, newest first.

    Slots for ``j < 0`` are filled with encryptions of zero at construction.
    """

    def __init__(self, order: int, width: int, backend):
        self.order, self.width = order, width
        self._buf = deque(([backend.encrypt(0) for _ in range(width)] for _ in range(order + 1)),
                          maxlen=order + 1)
        self.k = -1

    def push(self, enc_y: list) -> None:
        if len(enc_y) != self.width:
            raise DimensionError(f"expected {self.width} input ciphertexts, got {len(enc_y)}")
        self._buf.appendleft(list(enc_y))
        self.k += 1

    def __getitem__(self, j: int) -> list:
        return self._buf[j]

    def __len__(self):
        return len(self._buf)


def _component_sum(backend, taps: EncryptedTaps, hist_slots, tap_indices, i: int, counter: dict | None):
    """``sum_j sum_c tap_j[i, c] * hist_slot_j[c]`` over the given taps."""
    l = taps.shape[1]
    if taps.mode == "full":
        pairs = [(taps.payloads[j][i][c], slot[c]) for j, slot in zip(tap_indices, hist_slots) for c in range(l)]
        if counter is not None:
            counter["mul"] += len(pairs)
            counter["add"] += len(pairs) - 1
        return backend.dot(pairs)
    acc = None
    for j, slot in zip(tap_indices, hist_slots):
        for c in range(l):
            term = backend.mul_plain(slot[c], taps.payloads[j][i][c])
            acc = term if acc is None else backend.add(acc, term)
            if counter is not None:
                counter["mul"] += 1
                counter["add"] += 1
    if counter is not None:
        counter["add"] -= 1
    return acc


def _check_session(taps: EncryptedTaps, hist: EncryptedHistory):
    if hist.order != taps.order or hist.width != taps.shape[1]:
        raise DimensionError("history does not match the tap layout")


def encrypted_step(backend, taps: EncryptedTaps, hist: EncryptedHistory, enc_y_k: list,
                   counter: dict | None = None) -> list:
    """Push ``Enc(round(s7 y(k)))`` and return the ``m`` ciphertexts of ``v_f(k)``."""
    _check_session(taps, hist)
    hist.push(enc_y_k)
    idx = list(range(taps.order + 1))
    slots = [hist[j] for j in idx]
    return [_component_sum(backend, taps, slots, idx, i, counter) for i in range(taps.shape[0])]


class PrecomputedSession:
    """Split evaluation: the ``j >= 1`` part is formed between samples.

    ``prepare()`` may run as soon as ``y(k-1)`` has arrived; ``online(enc_y)``
    then only adds ``F_0 y(k)``, which costs ``lm`` multiplications.
    """

    def __init__(self, backend, taps: EncryptedTaps, hist: EncryptedHistory):
        _check_session(taps, hist)
        self.backend, self.taps, self.hist = backend, taps, hist
        self.deferred = None
        self.online_counter = {"mul": 0, "add": 0}

    @property
    def _level(self) -> int:
        return 1 if self.taps.mode == "full" else 0

    def prepare(self) -> None:
        """Deferred sum ``sum_{j>=1} F_j y(k-j)`` from the current history."""
        t, m = self.taps, self.taps.shape[0]
        if t.order == 0:
            self.deferred = [self.backend.zero(self._level) for _ in range(m)]
            return
        idx = list(range(1, t.order + 1))
        slots = [self.hist[j - 1] for j in idx]  # history not yet advanced
        self.deferred = [_component_sum(self.backend, t, slots, idx, i, None) for i in range(m)]

    def online(self, enc_y_k: list) -> list:
        if self.deferred is None:
            self.prepare()
        counter = {"mul": 0, "add": 0}
        self.hist.push(enc_y_k)
        out = []
        for i in range(self.taps.shape[0]):
            head = _component_sum(self.backend, self.taps, [self.hist[0]], [0], i, counter)
            out.append(self.backend.add(head, self.deferred[i]))
            counter["add"] += 1
        self.online_counter = counter
        self.deferred = None
        return out


def precomputed_step(backend, taps: EncryptedTaps, hist: EncryptedHistory, enc_y_k: list,
                     session: PrecomputedSession | None = None) -> list:
    """One step through a :class:`PrecomputedSession` (created on the fly if absent)."""
    session = session or PrecomputedSession(backend, taps, hist)
    return session.online(enc_y_k)


def decrypt_recover(backend, v_cts: list, s6: float, s7: float, strict: bool = False) -> np.ndarray:
    """``u = v / (s6 s7)``; the scaling does not depend on the step index."""
    v = [backend.decrypt_value(c, strict) for c in v_cts]
    return np.array([float(x) / (s6 * s7) for x in v])


def integer_convolution(int_taps, y_history_int) -> list:
    """Exact oracle ``sum_j round(s6 F_j) round(s7 y(k-j))`` on Python ints."""
    m, l = int_taps[0].shape
    out = []
    for i in range(m):
        acc = 0
        for t, y in zip(int_taps, y_history_int):
            for c in range(l):
                acc += int(t[i, c]) * int(y[c])
        out.append(acc)
    return out


def recovery_bound(f: FirFilter, h: InputHistory, s6: float, s7: float) -> np.ndarray:
    """Worst-case ``|v/(s6 s7) - sum_j F_j y(k-j)|`` per output component.

    Each product ``F y`` is replaced by ``(F + a)(y + b)`` with
    ``|a| <= 1/(2 s6)`` and ``|b| <= 1/(2 s7)``, giving the bound
    ``sum |F|/(2 s7) + |y|/(2 s6) + 1/(4 s6 s7)``.
    """
    m, l = f.n_outputs, f.n_inputs
    out = np.zeros(m)
    for j, tap in enumerate(f.taps):
        y = np.abs(h[j])
        out += np.abs(tap).sum(axis=1) / (2 * s7) + y.sum() / (2 * s6) + l / (4 * s6 * s7)
    return out


def depth_audit(f: FirFilter, mode: str, s6: float = 100.0, s7: float = 100.0, y_max: float = 1.0,
                params: HeParams | None = None) -> int:
    """Multiplicative depth of one encrypted step measured on the mock backend."""
    params = params or HeParams(ring_dim=16, t=2**40)
    be = MockBackend(params)
    taps = encode_taps(f, s6, mode, be, s7, y_max)
    hist = EncryptedHistory(f.order, f.n_inputs, be)
    for _ in range(2):
        encrypted_step(be, taps, hist, encrypt_input(be, np.full(f.n_inputs, y_max), s7))
    return be.max_depth


class EncryptedFirController:
    """Stateful helper holding one session: taps, history and the backend.

    ``step(y)`` runs the sensor rounding, encryption, homomorphic evaluation
    and recovery in one call; it is the building block of the in-process loop.
    """

    def __init__(self, f: FirFilter, backend, mode: str, s6: float, s7: float, y_max,
                 precompute: bool = False, headroom: str = "product"):
        self.filter, self.backend, self.mode = f, backend, mode
        self.s6, self.s7 = s6, s7
        self.taps = encode_taps(f, s6, mode, backend, s7, y_max, headroom)
        self.hist = EncryptedHistory(f.order, f.n_inputs, backend)
        self.session = PrecomputedSession(backend, self.taps, self.hist) if precompute else None
        self.last_v: list | None = None

    def evaluate(self, enc_y: list) -> list:
        if self.session is not None:
            out = self.session.online(enc_y)
            self.session.prepare()
            return out
        return encrypted_step(self.backend, self.taps, self.hist, enc_y)

    def step(self, y) -> np.ndarray:
        v_cts = self.evaluate(encrypt_input(self.backend, y, self.s7))
        self.last_v = [self.backend.decrypt_value(c) for c in v_cts]
        return np.array([float(x) / (self.s6 * self.s7) for x in self.last_v])


def make_backend(kind: str, params: HeParams | None = None, seed: int = 0, keys=None):
    """``"mock"`` or ``"bfv"`` backend; BFV keys are generated from ``seed`` unless given."""
    from .he_backend import DEFAULT_PARAMS, keygen

    params = params or DEFAULT_PARAMS
    if kind == "mock":
        return MockBackend(params, seed)
    if kind == "bfv":
        return BfvBackend(keys or keygen(params, seed), seed=seed + 1)
    raise ValueError(f"unknown backend {kind!r}")
