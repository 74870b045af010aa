"""Closed-loop execution: plant simulator, controller roles and transports.

The plant, the sensor and the actuator live on one side and share the key
material; this is the only place where ``y``, ``u`` and the secret key exist
in the clear.  The cloud side is built from the PARAMS message alone, which
carries evaluation keys but never the secret, so an encrypted session cannot
be decrypted by the party evaluating it.

Message flow of one encrypted session::

    plant -> HELLO                 cloud -> HELLO
    plant -> PARAMS (keys, taps)   cloud -> PARAMS (status)
    plant -> SENSOR_DATA(k)        cloud -> CONTROL_ACTION(k)      (every step)
                                   cloud -> STATE_REFRESH_DOWN     (refresh, every T steps)
    plant -> STATE_REFRESH_UP
    plant -> BYE                   cloud -> BYE

A failure on the cloud side is reported with a BYE whose JSON payload holds
``error`` and ``detail``; the plant side raises the matching exception.
"""

from __future__ import annotations

import csv
import io
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import benchmark
from .baselines import RefreshCloud, RefreshMissed, RefreshPlantSide, ResetController
from .encrypted_fir import (
    EncryptedFirController,
    EncryptedHistory,
    EncryptedTaps,
    PrecomputedSession,
    _y_bounds,
    encode_taps,
    encrypt_input,
    encrypted_step,
)
from .fir import FirFilter, InputHistory, evaluate_fir
from .he_backend import (
    DEFAULT_PARAMS,
    BfvBackend,
    EvaluationKeys,
    HeParams,
    KeyMaterial,
    LevelError,
    MagnitudeOverflow,
    MockBackend,
    NoiseOverflow,
    keygen,
)
from .lti import DimensionError, StateSpace, is_schur, model_from_dict, spectral_radius
from .quantizer import IntegerController, ScalingProfile, recover
from .wire import (
    Channel,
    HEADER,
    DropPolicy,
    LossyChannel,
    MsgType,
    ProtocolError,
    SocketChannel,
    TransportError,
    TransportTimeout,
    WireMessage,
    inproc_pair,
    listen,
    pack_ciphertexts,
    pack_json,
    pack_params,
    unpack_ciphertexts,
    unpack_json,
    unpack_params,
)

CONTROLLER_KINDS = ("zero", "iir", "reset", "integer-iir", "fir", "encrypted-fir", "refresh")
ENCRYPTED_KINDS = ("encrypted-fir", "refresh")


class IllPosedLoop(ValueError):
    """``I - D_c D_p`` is singular, or the loop needs an algebraic solve the runner does not do."""


# -- closed-loop structure ------------------------------------------------------------

def closed_loop_matrix(plant: StateSpace, ctrl: StateSpace) -> tuple[np.ndarray, bool, float]:
    """State matrix of the feedback loop ``y = plant(u)``, ``u = ctrl(y)``.

    Returns ``(A_cl, is_schur(A_cl), spectral radius)`` over the stacked
    state ``(x_p, x_c)``.  With ``M = (I - D_c D_p)^-1`` the loop input is
    ``u = M (D_c C_p x_p + C_c x_c)``.
    """
    if ctrl.n_inputs != plant.n_outputs or ctrl.n_outputs != plant.n_inputs:
        raise DimensionError("controller dimensions do not match the plant")
    m = plant.n_inputs
    loop = np.eye(m) - ctrl.d @ plant.d
    if np.linalg.cond(loop) > 1e12:
        raise IllPosedLoop("I - D_c D_p is singular")
    inv = np.linalg.inv(loop)
    k_p = inv @ ctrl.d @ plant.c
    k_c = inv @ ctrl.c
    y_p = plant.c + plant.d @ k_p
    y_c = plant.d @ k_c
    a_cl = np.block([
        [plant.a + plant.b @ k_p, plant.b @ k_c],
        [ctrl.b @ y_p, ctrl.a + ctrl.b @ y_c],
    ])
    return a_cl, is_schur(a_cl), spectral_radius(a_cl)


# -- scenario description ---------------------------------------------------------------

@dataclass
class EncryptionConfig:
    backend: str = "bfv"  # "bfv" or "mock"
    mode: str = "full"  # FIR tap handling, "partial" or "full"
    s6: float = 8.0
    s7: float = 8.0
    y_max: object = 10.0  # scalar or one bound per plant output
    headroom: str = "product"  # or "exact", see encode_taps
    precompute: bool = False
    params: HeParams = DEFAULT_PARAMS
    keys: KeyMaterial | None = None  # generated from the scenario seed when absent
    strict: bool = True  # flag steps whose decryption fails the noise check


@dataclass
class ControllerSpec:
    kind: str
    model: StateSpace | None = None  # iir, reset, integer-iir, refresh
    filter: FirFilter | None = None  # fir, encrypted-fir
    period: int | None = None  # reset, refresh
    profile: ScalingProfile | None = None  # integer-iir, refresh
    encryption: EncryptionConfig | None = None

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"controller kind must be one of {CONTROLLER_KINDS}")
        needs = {
            "iir": ("model",), "reset": ("model", "period"), "integer-iir": ("model", "profile"),
            "fir": ("filter",), "encrypted-fir": ("filter",), "refresh": ("model", "profile", "period"),
        }.get(self.kind, ())
        for name in needs:
            if getattr(self, name) is None:
                raise ValueError(f"controller kind {self.kind!r} needs {name!r}")
        if self.kind in ENCRYPTED_KINDS and self.encryption is None:
            self.encryption = EncryptionConfig()

    def dims(self) -> tuple[int, int] | None:
        """``(inputs, outputs)`` of the controller, ``None`` for the zero controller."""
        if self.filter is not None and self.kind in ("fir", "encrypted-fir"):
            return self.filter.n_inputs, self.filter.n_outputs
        if self.model is not None:
            return self.model.n_inputs, self.model.n_outputs
        return None

    def as_statespace(self) -> StateSpace | None:
        """Linear realization for :func:`closed_loop_matrix` (``None`` for time-varying kinds)."""
        from .fir import fir_to_statespace

        if self.kind in ("fir", "encrypted-fir"):
            return fir_to_statespace(self.filter)
        if self.kind == "iir":
            return self.model
        return None


@dataclass
class Scenario:
    plant: StateSpace
    controller: ControllerSpec
    steps: int
    x0: np.ndarray | None = None
    transport: str = "inproc"  # "inproc" or "socket"
    host: str = "127.0.0.1"
    port: int = 0
    seed: int = 0
    timeout: float = 30.0
    refresh_timeout: float = 2.0
    drop: DropPolicy | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.transport not in ("inproc", "socket"):
            raise ValueError("transport must be 'inproc' or 'socket'")
        self.x0 = np.array(self.plant.x0 if self.x0 is None else self.x0, dtype=float).reshape(-1)
        if self.x0.size != self.plant.n_states:
            raise DimensionError("initial plant state has the wrong width")
        dims = self.controller.dims()
        if dims is not None and dims != (self.plant.n_outputs, self.plant.n_inputs):
            raise DimensionError(
                f"controller maps {dims[0]} -> {dims[1]} but the plant has "
                f"{self.plant.n_outputs} outputs and {self.plant.n_inputs} inputs")


@dataclass
class SimTrace:
    """Per-step record of a closed-loop run; row ``k`` holds ``x(k)``, ``y(k)`` and ``u(k)``."""

    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    latency_ms: np.ndarray
    flags: list
    v: list = field(default_factory=list)  # decrypted integer outputs (encrypted kinds)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.flags)

    @property
    def norm_x(self) -> np.ndarray:
        return np.linalg.norm(self.x, axis=1)

    def columns(self) -> list[str]:
        n, l, m = self.x.shape[1], self.y.shape[1], self.u.shape[1]
        return (["k"] + [f"x_{i + 1}" for i in range(n)] + [f"y_{i + 1}" for i in range(l)]
                + [f"u_{i + 1}" for i in range(m)] + ["norm_x", "latency_ms", "flags"])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        norms = self.norm_x
        for k in range(len(self)):
            w.writerow([k, *_reprs(self.x[k]), *_reprs(self.y[k]), *_reprs(self.u[k]),
                        repr(float(norms[k])), f"{self.latency_ms[k]:.3f}", self.flags[k]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text: str, n: int, l: int, m: int) -> "SimTrace":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        num = np.array([[float(v) for v in r[1:-1]] for r in rows]).reshape(len(rows), n + l + m + 2)
        return cls(num[:, :n], num[:, n:n + l], num[:, n + l:n + l + m], num[:, -1],
                   [r[-1] for r in rows])

    def norm_plot_data(self) -> str:
        """Two-column ``k  |x(k)|`` text for gnuplot."""
        return "".join(f"{k} {float(v)!r}\n" for k, v in enumerate(self.norm_x))


def _reprs(row) -> list:
    return [repr(float(v)) for v in row]


# -- plaintext controllers ----------------------------------------------------------------

class _LinearStep:
    def __init__(self, sys: StateSpace):
        self.sys = sys
        self.x = np.array(sys.x0, dtype=float)

    def step(self, y):
        u = self.sys.c @ self.x + self.sys.d @ y
        self.x = self.sys.a @ self.x + self.sys.b @ y
        return u, ""


class _FirStep:
    def __init__(self, f: FirFilter):
        self.f = f
        self.hist = InputHistory(f.order, f.n_inputs)

    def step(self, y):
        self.hist.push(y)
        return evaluate_fir(self.f, self.hist), ""


class _ResetStep:
    def __init__(self, model: StateSpace, period: int):
        self.rc = ResetController(model, period)

    def step(self, y):
        return self.rc.step(y), ""


class _IntegerStep:
    def __init__(self, model: StateSpace, profile: ScalingProfile):
        self.ctrl = IntegerController(model, profile)

    def step(self, y):
        k = self.ctrl.k
        v, overflowed = self.ctrl.step(y)
        return recover(v, k, self.ctrl.profile, "input"), "overflow" if overflowed else ""


class _ZeroStep:
    def __init__(self, m: int):
        self.m = m

    def step(self, y):
        return np.zeros(self.m), ""


def _plain_controller(spec: ControllerSpec, m: int):
    if spec.kind == "zero":
        return _ZeroStep(m)
    if spec.kind == "iir":
        return _LinearStep(spec.model)
    if spec.kind == "fir":
        return _FirStep(spec.filter)
    if spec.kind == "reset":
        return _ResetStep(spec.model, spec.period)
    if spec.kind == "integer-iir":
        return _IntegerStep(spec.model, spec.profile)
    raise ValueError(f"{spec.kind!r} is not a plaintext controller")


# -- cloud role ---------------------------------------------------------------------------

class CloudSession:
    """Evaluating party of one session.

    Everything it holds comes from PARAMS: evaluation keys (BFV), tap
    payloads and the encrypted state.  Plaintext ``y`` and ``u`` never reach
    it, and a PARAMS message that carries a secret key is rejected.
    """

    def __init__(self):
        self.backend = None
        self.kind = None
        self.steps = 0
        self.precompute = None
        self.fir = None  # (taps, history)
        self.refresh = None  # RefreshCloud

    def configure(self, payload: bytes) -> None:
        meta, offset = unpack_params(payload)
        kind = meta.get("session")
        if kind not in ("fir", "refresh"):
            raise ProtocolError(f"unknown session kind {kind!r}")
        params = HeParams.from_dict(meta["he_params"])
        if meta["backend"] == "bfv":
            keys = meta.get("evaluation_keys")
            if keys is None:
                raise ProtocolError("BFV session without evaluation keys")
            if "secret" in keys:
                raise ProtocolError("refusing key material that includes the secret key")
            ek = EvaluationKeys.from_dict(keys)
            if ek.params != params:
                raise ProtocolError("evaluation keys do not match the announced parameters")
            self.backend = BfvBackend(ek, seed=int(meta["seed"]))
        elif meta["backend"] == "mock":
            self.backend = MockBackend(params, int(meta["seed"]))
        else:
            raise ProtocolError(f"unknown backend {meta['backend']!r}")
        _, cts = unpack_ciphertexts(payload, self.backend, offset)
        self.kind = kind
        if kind == "fir":
            self._configure_fir(meta, cts)
        else:
            self._configure_refresh(meta, cts)

    def _configure_fir(self, meta: dict, cts: list) -> None:
        order = int(meta["order"])
        m, l = meta["shape"]
        mode = meta["mode"]
        be = self.backend
        if mode == "partial":
            ints = meta["int_taps"]
            payloads = [[[be.encode(int(ints[j][i][c])) for c in range(l)] for i in range(m)]
                        for j in range(order + 1)]
        elif mode == "full":
            if len(cts) != (order + 1) * m * l:
                raise ProtocolError("wrong number of encrypted taps")
            it = iter(cts)
            payloads = [[[next(it) for _ in range(l)] for _ in range(m)] for _ in range(order + 1)]
        else:
            raise ProtocolError(f"unknown tap mode {mode!r}")
        taps = EncryptedTaps(mode, payloads, None, 0.0, 0.0, 0.0)
        hist = EncryptedHistory(order, l, be)
        self.fir = (taps, hist)
        if meta.get("precompute"):
            self.precompute = PrecomputedSession(be, taps, hist)
            self.precompute.prepare()

    def _configure_refresh(self, meta: dict, cts: list) -> None:
        mats = {}
        for name in ("a_bar", "b_bar", "c_bar", "d_bar"):
            rows = meta[name]
            cols = int(meta["dims"][name])
            mats[name] = np.array([[int(v) for v in r] for r in rows], dtype=object).reshape(len(rows), cols)
        n = mats["a_bar"].shape[0]
        if len(cts) != n:
            raise ProtocolError("wrong number of initial state ciphertexts")
        self.refresh = RefreshCloud(self.backend, mats["a_bar"], mats["b_bar"], mats["c_bar"],
                                    mats["d_bar"], cts, int(meta["period"]))

    def evaluate(self, y_cts: list) -> tuple[list, list | None]:
        if self.kind == "fir":
            taps, hist = self.fir
            if self.precompute is not None:
                return self.precompute.online(y_cts), None
            return encrypted_step(self.backend, taps, hist, y_cts), None
        return self.refresh.step(y_cts)

    def after_reply(self) -> None:
        """Work that may run between samples."""
        if self.precompute is not None:
            self.precompute.prepare()

    def handle(self, msg: WireMessage) -> list:
        """Replies to one incoming message."""
        if msg.type == MsgType.HELLO:
            return [WireMessage(MsgType.HELLO, pack_json({"role": "cloud", "version": 1}))]
        if msg.type == MsgType.PARAMS:
            self.configure(msg.payload)
            return [WireMessage(MsgType.PARAMS, pack_json({"status": "ready"}))]
        if self.backend is None:
            raise ProtocolError(f"{msg.type.name} before PARAMS")
        if msg.type == MsgType.SENSOR_DATA:
            k, y_cts = unpack_ciphertexts(msg.payload, self.backend)
            v_cts, down = self.evaluate(y_cts)
            self.steps += 1
            out = [WireMessage(MsgType.CONTROL_ACTION, pack_ciphertexts(k, v_cts))]
            if down is not None:
                out.append(WireMessage(MsgType.STATE_REFRESH_DOWN, pack_ciphertexts(k, down)))
            return out
        if msg.type == MsgType.STATE_REFRESH_UP:
            if self.refresh is None:
                raise ProtocolError("state refresh in a session without state")
            _, z_cts = unpack_ciphertexts(msg.payload, self.backend)
            self.refresh.accept_refresh(z_cts)
            return []
        raise ProtocolError(f"unexpected {msg.type.name} on the cloud side")


_ERROR_KINDS = {
    "refresh-missed": RefreshMissed,
    "overflow": MagnitudeOverflow,
    "level": LevelError,
    "protocol": ProtocolError,
    "dimension": DimensionError,
}


def _error_kind(exc: Exception) -> str:
    for name, cls in _ERROR_KINDS.items():
        if isinstance(exc, cls):
            return name
    return "internal"


@dataclass
class ServeResult:
    steps: int
    error: str | None = None
    session: CloudSession | None = None


def serve_channel(channel: Channel, timeout: float | None = None) -> ServeResult:
    """Serve one session until BYE, an error or a transport failure."""
    session = CloudSession()
    try:
        while True:
            msg = channel.recv(timeout)
            if msg.type == MsgType.BYE:
                channel.send(WireMessage(MsgType.BYE, pack_json({"steps": session.steps})))
                return ServeResult(session.steps, None, session)
            for reply in session.handle(msg):
                channel.send(reply)
            if msg.type == MsgType.SENSOR_DATA:
                session.after_reply()
    except TransportError as exc:
        return ServeResult(session.steps, f"transport: {exc}", session)
    except Exception as exc:  # reported to the peer, then the connection is dropped
        diag = {"error": _error_kind(exc), "detail": str(exc), "step": session.steps}
        try:
            channel.send(WireMessage(MsgType.BYE, pack_json(diag)))
        except TransportError:
            pass
        return ServeResult(session.steps, f"{diag['error']}: {exc}", session)
    finally:
        channel.close()


class CloudServer:
    """TCP front end; each connection is an independent session in its own thread."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, timeout: float | None = 60.0,
                 drop: DropPolicy | None = None, seed: int = 0):
        self.sock = listen(host, port)
        self.timeout = timeout
        self.drop, self.seed = drop, seed
        self.results: list[ServeResult] = []
        self._threads: list[threading.Thread] = []
        self._lock = threading.Lock()

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def _serve(self, channel: Channel) -> None:
        result = serve_channel(channel, self.timeout)
        with self._lock:
            self.results.append(result)

    def serve(self, max_sessions: int | None = None) -> None:
        count = 0
        while max_sessions is None or count < max_sessions:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                break
            channel: Channel = SocketChannel(conn)
            if self.drop is not None:
                channel = LossyChannel(channel, self.drop, self.seed + count)
            t = threading.Thread(target=self._serve, args=(channel,), daemon=True)
            t.start()
            self._threads.append(t)
            count += 1
        for t in self._threads:
            t.join()

    def close(self) -> None:
        self.sock.close()


def serve_cloud(host: str = "127.0.0.1", port: int = 0, max_sessions: int | None = None,
                timeout: float | None = 60.0, ready=None) -> list[ServeResult]:
    """Blocking server; ``ready(address)`` is called once the socket listens."""
    server = CloudServer(host, port, timeout)
    if ready is not None:
        ready(server.address)
    try:
        server.serve(max_sessions)
    finally:
        server.close()
    return server.results


# -- plant role ---------------------------------------------------------------------------

def _int_rows(mat) -> list:
    return [[str(int(v)) for v in row] for row in np.asarray(mat, dtype=object)]


class PlantSide:
    """Plant simulator with the co-located sensor and actuator of an encrypted session.

    Holds the full key set.  ``open()`` performs the handshake, ``step`` one
    sample: measure, encrypt and send ``y``, then decrypt the returned
    control action and apply it.
    """

    def __init__(self, scenario: Scenario):
        sc = self.sc = scenario
        spec = sc.controller
        enc = self.enc = spec.encryption
        if sc.plant.d.any():
            raise IllPosedLoop("the loop runner needs a plant without feedthrough (D_p = 0)")
        if enc.backend == "bfv":
            keys = enc.keys or keygen(enc.params, sc.seed)
            if keys.params != enc.params:
                raise ValueError("key material does not match the session parameters")
            self.backend = BfvBackend(keys, seed=sc.seed + 1)
        elif enc.backend == "mock":
            self.backend = MockBackend(enc.params, sc.seed)
        else:
            raise ValueError(f"unknown backend {enc.backend!r}")
        self.x = sc.x0.copy()
        self.k = 0
        self.refresh_side = None
        self.refresh_log = {"down": [], "up": []}

    def params_message(self) -> WireMessage:
        spec, enc, be = self.sc.controller, self.enc, self.backend
        meta = {"backend": enc.backend, "he_params": enc.params.to_dict(), "seed": self.sc.seed + 7}
        if enc.backend == "bfv":
            meta["evaluation_keys"] = be.keys.evaluation_keys().to_dict()
        blob_cts: list = []
        if spec.kind == "encrypted-fir":
            f = spec.filter
            taps = encode_taps(f, enc.s6, enc.mode, be, enc.s7, enc.y_max, enc.headroom)
            meta.update(session="fir", mode=enc.mode, order=f.order, shape=[f.n_outputs, f.n_inputs],
                        precompute=bool(enc.precompute))
            if enc.mode == "partial":
                meta["int_taps"] = [_int_rows(t) for t in taps.int_taps]
            else:
                blob_cts = [ct for rows in taps.payloads for row in rows for ct in row]
            self.taps = taps
        else:
            ctrl = IntegerController(spec.model, spec.profile)
            self.refresh_side = RefreshPlantSide(be, ctrl, spec.period)
            meta.update(session="refresh", period=spec.period)
            for name in ("a_bar", "b_bar", "c_bar", "d_bar"):
                meta[name] = _int_rows(getattr(ctrl, name))
            meta["dims"] = {name: int(getattr(ctrl, name).shape[1]) for name in ("a_bar", "b_bar", "c_bar", "d_bar")}
            blob_cts = self.refresh_side.initial_state()
        return WireMessage(MsgType.PARAMS, pack_params(meta, pack_ciphertexts(0, blob_cts)))

    def _expect(self, channel: Channel, mtype: MsgType, timeout: float | None) -> WireMessage:
        msg = channel.recv(timeout)
        if msg.type != mtype:
            self._raise_from(msg, mtype)
        return msg

    @staticmethod
    def _raise_from(msg: WireMessage, expected: MsgType = MsgType.BYE):
        if msg.type == MsgType.BYE:
            info = unpack_json(msg.payload) if msg.payload else {}
            cls = _ERROR_KINDS.get(info.get("error"), ProtocolError)
            raise cls(f"cloud ended the session: {info.get('detail', 'no reason given')}")
        raise ProtocolError(f"expected {expected.name}, got {msg.type.name}")

    def open(self, channel: Channel) -> None:
        t = self.sc.timeout
        channel.send(WireMessage(MsgType.HELLO, pack_json({"role": "plant", "version": 1})))
        self._expect(channel, MsgType.HELLO, t)
        channel.send(self.params_message())
        status = unpack_json(self._expect(channel, MsgType.PARAMS, t).payload)
        if status.get("status") != "ready":
            raise ProtocolError(f"cloud rejected the parameters: {status}")

    def sense(self, y) -> list:
        if self.refresh_side is not None:
            return self.refresh_side.sense(y)
        return encrypt_input(self.backend, y, self.enc.s7)

    def _decrypt(self, ct) -> tuple[int, bool]:
        if self.enc.strict and self.enc.backend == "bfv":
            try:
                return self.backend.decrypt_value(ct, strict=True), False
            except NoiseOverflow:
                return self.backend.decrypt_value(ct), True
        return self.backend.decrypt_value(ct), False

    def actuate(self, v_cts: list) -> tuple[np.ndarray, list, str]:
        decoded = [self._decrypt(c) for c in v_cts]
        v = [d[0] for d in decoded]
        flag = "noise" if any(d[1] for d in decoded) else ""
        if self.refresh_side is not None:
            rs = self.refresh_side
            u = recover(v, rs.kappa, rs.profile, "input")
            rs.kappa += 1
        else:
            u = np.array([float(x) / (self.enc.s6 * self.enc.s7) for x in v])
        return u, v, flag

    def step(self, channel: Channel):
        plant = self.sc.plant
        t0 = time.perf_counter()
        y = plant.c @ self.x
        channel.send(WireMessage(MsgType.SENSOR_DATA, pack_ciphertexts(self.k, self.sense(y))))
        reply = self._expect(channel, MsgType.CONTROL_ACTION, self.sc.timeout)
        k, v_cts = unpack_ciphertexts(reply.payload, self.backend)
        if k != self.k:
            raise ProtocolError(f"control action for step {k} arrived at step {self.k}")
        u, v, flag = self.actuate(v_cts)
        if self.refresh_side is None and np.any(np.abs(y) > np.abs(np.asarray(self.enc.y_max, dtype=float))):
            flag = "+".join(filter(None, (flag, "y_max")))
        rs = self.refresh_side
        if rs is not None and rs.kappa == rs.period:
            try:
                down = self._expect(channel, MsgType.STATE_REFRESH_DOWN, self.sc.refresh_timeout)
            except TransportTimeout as exc:
                raise RefreshMissed(f"no state refresh within {self.sc.refresh_timeout} s after step {self.k}") from exc
            _, z_cts = unpack_ciphertexts(down.payload, self.backend)
            self.refresh_log["down"].append(len(z_cts))
            up = rs.refresh(z_cts)
            channel.send(WireMessage(MsgType.STATE_REFRESH_UP, pack_ciphertexts(self.k, up)))
            self.refresh_log["up"].append(len(up))
        latency = (time.perf_counter() - t0) * 1e3
        x = self.x
        self.x = plant.a @ x + plant.b @ u
        self.k += 1
        return x, y, u, v, latency, flag

    def close(self, channel: Channel) -> None:
        channel.send(WireMessage(MsgType.BYE))
        msg = channel.recv(self.sc.timeout)
        if msg.type != MsgType.BYE or "error" in (unpack_json(msg.payload) if msg.payload else {}):
            self._raise_from(msg)
        channel.close()


def _collect(rows, n, l, m) -> SimTrace:
    if not rows:
        return SimTrace(np.zeros((0, n)), np.zeros((0, l)), np.zeros((0, m)), np.zeros(0), [])
    xs, ys, us, vs, lat, flags = zip(*rows)
    return SimTrace(np.array(xs), np.array(ys), np.array(us), np.array(lat), list(flags),
                    [list(v) for v in vs])


def sensor_client(scenario: Scenario, channel: Channel | None = None) -> SimTrace:
    """Plant-side client: runs the whole encrypted loop against a cloud.

    Connects to ``scenario.host:port`` unless a channel is given.  Errors
    carry the step index in their ``step`` attribute.
    """
    if channel is None:
        channel = SocketChannel.connect(scenario.host, scenario.port, scenario.timeout)
        if scenario.drop is not None:
            channel = LossyChannel(channel, scenario.drop, scenario.seed + 101)
    plant_side = PlantSide(scenario)
    rows = []
    try:
        plant_side.open(channel)
        for _ in range(scenario.steps):
            rows.append(plant_side.step(channel))
        plant_side.close(channel)
    except Exception as exc:
        exc.step = plant_side.k
        channel.close()
        raise
    p = scenario.plant
    trace = _collect(rows, p.n_states, p.n_outputs, p.n_inputs)
    trace.meta.update(refresh_down=plant_side.refresh_log["down"], refresh_up=plant_side.refresh_log["up"],
                      sent=dict(channel.stats.sent), bytes_sent=channel.stats.bytes_sent)
    return trace


def actuator_client(frames: bytes, keys: KeyMaterial, s6: float, s7: float) -> list:
    """Decrypt a log of CONTROL_ACTION frames (concatenated wire messages) into ``u`` vectors."""
    backend = BfvBackend(keys)
    out, pos = [], 0
    while pos < len(frames):
        mtype, length = WireMessage.parse_header(frames[pos:pos + HEADER.size])
        payload = frames[pos + HEADER.size:pos + HEADER.size + length]
        if len(payload) != length:
            raise ProtocolError("truncated frame log")
        pos += HEADER.size + length
        if mtype != MsgType.CONTROL_ACTION:
            continue
        _, cts = unpack_ciphertexts(payload, backend)
        out.append(np.array([backend.decrypt_value(c) / (s6 * s7) for c in cts]))
    return out


# -- scenario runner ------------------------------------------------------------------------

def _run_plain(sc: Scenario) -> SimTrace:
    p = sc.plant
    if p.d.any() and sc.controller.kind != "zero":
        raise IllPosedLoop("the loop runner needs a plant without feedthrough (D_p = 0)")
    ctrl = _plain_controller(sc.controller, p.n_inputs)
    x = sc.x0.copy()
    rows = []
    for k in range(sc.steps):
        t0 = time.perf_counter()
        y = p.c @ x
        try:
            u, flag = ctrl.step(y)
        except Exception as exc:
            exc.step = k
            raise
        latency = (time.perf_counter() - t0) * 1e3
        rows.append((x, y, np.asarray(u, dtype=float), [], latency, flag))
        x = p.a @ x + p.b @ u
    return _collect(rows, p.n_states, p.n_outputs, p.n_inputs)


def _run_encrypted(sc: Scenario) -> SimTrace:
    result: dict = {}
    if sc.transport == "inproc":
        plant_end, cloud_end = inproc_pair()
        if sc.drop is not None:
            plant_end = LossyChannel(plant_end, sc.drop, sc.seed + 101)
            cloud_end = LossyChannel(cloud_end, sc.drop, sc.seed)
        worker = threading.Thread(target=lambda: result.setdefault("cloud", serve_channel(cloud_end, sc.timeout)),
                                  daemon=True)
        worker.start()
        try:
            trace = sensor_client(sc, plant_end)
        finally:
            worker.join(sc.timeout)
    else:
        server = CloudServer(sc.host, sc.port, sc.timeout, sc.drop, sc.seed)
        worker = threading.Thread(target=server.serve, args=(1,), daemon=True)
        worker.start()
        host, port = server.address
        try:
            trace = sensor_client(Scenario(**{**sc.__dict__, "host": host, "port": port}))
        finally:
            worker.join(sc.timeout)
            server.close()
        if server.results:
            result["cloud"] = server.results[0]
    cloud = result.get("cloud")
    if cloud is not None:
        trace.meta["cloud_steps"] = cloud.steps
        trace.meta["cloud_can_decrypt"] = bool(getattr(cloud.session.backend, "can_decrypt", False)) \
            if cloud.session and sc.controller.encryption.backend == "bfv" else None
        trace.meta["cloud_session"] = cloud.session
    return trace


def run_scenario(sc: Scenario) -> SimTrace:
    """Run the closed loop for ``sc.steps`` samples.

    Plaintext kinds run in process; encrypted kinds run the plant and the
    cloud role in separate threads over the chosen transport.
    """
    if sc.controller.kind in ENCRYPTED_KINDS:
        return _run_encrypted(sc)
    return _run_plain(sc)


# -- latency ----------------------------------------------------------------------------------

@dataclass
class LatencyStats:
    samples_ms: np.ndarray

    @property
    def min_ms(self) -> float:
        return float(np.min(self.samples_ms))

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))

    @property
    def p99_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 99))

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    def to_dict(self) -> dict:
        return {"steps": int(len(self.samples_ms)), "min_ms": self.min_ms, "median_ms": self.median_ms,
                "p99_ms": self.p99_ms, "mean_ms": self.mean_ms}


def bench_step_latency(session: EncryptedFirController, steps: int = 50, warmup: int = 3,
                       seed: int = 0) -> LatencyStats:
    """Wall-clock time of the homomorphic evaluation of one step.

    Inputs are drawn in ``[-y_max, y_max]`` and encrypted outside the timed
    region, which covers only the work of the evaluating party.
    """
    rng = np.random.default_rng(seed)
    l = session.filter.n_inputs
    y_max = _y_bounds(session.taps.y_max, l)
    total = warmup + steps
    inputs = [encrypt_input(session.backend, rng.uniform(-y_max, y_max, l), session.s7) for _ in range(total)]
    samples = []
    for i, enc_y in enumerate(inputs):
        t0 = time.perf_counter()
        session.evaluate(enc_y)
        dt = (time.perf_counter() - t0) * 1e3
        if i >= warmup:
            samples.append(dt)
    return LatencyStats(np.array(samples))


def latency_vs_order(orders=(2, 4, 8, 16), mode: str = "full", backend: str = "bfv", steps: int = 10,
                     params: HeParams | None = None, seed: int = 0, keys=None) -> dict:
    """Median step latency per order with a least-squares line ``a + b N``.

    Taps are random in ``[-1, 1]`` and scaled with ``s6 = s7 = 4``, inputs
    are bounded by 1.
    """
    from .encrypted_fir import make_backend

    params = params or DEFAULT_PARAMS
    rng = np.random.default_rng(seed)
    if backend == "bfv" and keys is None:
        keys = keygen(params, seed)
    medians = {}
    for n in orders:
        f = FirFilter([rng.uniform(-1, 1, (1, 2)) for _ in range(n + 1)])
        be = make_backend(backend, params, seed, keys)
        ctrl = EncryptedFirController(f, be, mode, 4.0, 4.0, 1.0)
        medians[n] = bench_step_latency(ctrl, steps, warmup=1, seed=seed).median_ms
    xs = np.array(list(medians), dtype=float)
    ys = np.array(list(medians.values()))
    slope, intercept = np.polyfit(xs, ys, 1)
    fit = intercept + slope * xs
    ss_res = float(np.sum((ys - fit) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"median_ms": medians, "slope_ms": float(slope), "intercept_ms": float(intercept), "r2": r2}


# -- JSON scenario description -----------------------------------------------------------------

def _load_json_or_path(obj, base: Path):
    import json

    if isinstance(obj, str):
        return json.loads((base / obj).read_text())
    return obj


def plant_from_dict(obj, base: Path = Path(".")) -> StateSpace:
    obj = _load_json_or_path(obj, base)
    if obj.get("builtin") == "reactor":
        return benchmark.reactor()
    if "builtin" in obj:
        raise ValueError(f"unknown built-in plant {obj['builtin']!r}")
    return model_from_dict(obj)


def filter_from_dict(obj, base: Path = Path(".")) -> FirFilter:
    obj = _load_json_or_path(obj, base)
    if "builtin" in obj:
        return benchmark.tap_filter(obj["builtin"])
    return FirFilter.from_dict(obj)


def scenario_from_dict(d: dict, base=".", keys: KeyMaterial | None = None) -> Scenario:
    """Build a :class:`Scenario` from its JSON form (validate it against the schema first).

    ``plant``, ``controller.model`` and ``controller.filter`` may be inline
    objects, ``{"builtin": name}`` or paths relative to ``base``.
    """
    base = Path(base)
    plant = plant_from_dict(d["plant"], base)
    c = d["controller"]
    enc = None
    if "encryption" in c or c["kind"] in ENCRYPTED_KINDS:
        e = c.get("encryption", {})
        enc = EncryptionConfig(
            backend=e.get("backend", "bfv"), mode=e.get("mode", "full"),
            s6=float(e.get("s6", 8.0)), s7=float(e.get("s7", 8.0)), y_max=e.get("y_max", 10.0),
            headroom=e.get("headroom", "product"),
            precompute=bool(e.get("precompute", False)),
            params=HeParams.from_dict(e["params"]) if "params" in e else DEFAULT_PARAMS,
            keys=keys, strict=bool(e.get("strict", True)))
    spec = ControllerSpec(
        kind=c["kind"],
        model=plant_from_dict(c["model"], base) if "model" in c else None,
        filter=filter_from_dict(c["filter"], base) if "filter" in c else None,
        period=c.get("period"),
        profile=ScalingProfile.from_dict(c["profile"]) if "profile" in c else None,
        encryption=enc)
    t = d.get("transport", {"kind": "inproc"})
    return Scenario(
        plant=plant, controller=spec, steps=int(d["steps"]),
        x0=d.get("x0"), transport=t.get("kind", "inproc"), host=t.get("host", "127.0.0.1"),
        port=int(t.get("port", 0)), seed=int(d.get("seed", 0)), timeout=float(d.get("timeout", 30.0)),
        refresh_timeout=float(d.get("refresh_timeout", 2.0)),
        drop=DropPolicy.from_dict(d["drop"]) if "drop" in d else None)


def decay_step(trace: SimTrace, fraction: float = 0.1) -> int | None:
    """First ``k`` with ``|x(k)| < fraction |x(0)|``, or ``None``."""
    norms = trace.norm_x
    if len(norms) == 0:
        return None
    hits = np.flatnonzero(norms < fraction * norms[0])
    return int(hits[0]) if hits.size else None


def is_finite_trace(trace: SimTrace) -> bool:
    return bool(np.all(np.isfinite(trace.x))) and not math.isnan(float(np.sum(trace.u)))
