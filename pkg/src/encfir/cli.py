"""Command-line front end: ``encfir <subcommand> ...``.

Exit codes: 0 success, 1 usage or other error, 2 infeasible design,
3 overflow detected, 4 transport failure, 5 schema error.  Commands that
read a run configuration fall back to the file named by ``ENCFIR_CONFIG``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import acceptance, benchmark, lmi
from .baselines import RefreshMissed
from .encrypted_fir import EncryptedFirController, HeadroomError, depth_audit, make_backend
from .fir import (
    FirFilter,
    InfeasibleDesign,
    fir_to_statespace,
    NotSchurWarning,
    RegularizedInverseWarning,
    causal_inverse_weight,
    efficient_order_bound,
    hinf_fir_design,
    identity_weight,
    minimize_gamma,
    opcounts,
    truncation_indicator,
    window_fir,
)
from .he_backend import (
    DEFAULT_PARAMS,
    HeParams,
    KeyMaterial,
    LevelError,
    MagnitudeOverflow,
    keygen,
    load_keys,
    save_keys,
)
from .lti import StateSpace, model_from_dict, model_to_dict
from .loop_service import (
    CloudServer,
    ControllerSpec,
    EncryptionConfig,
    Scenario,
    SimTrace,
    actuator_client,
    bench_step_latency,
    closed_loop_matrix,
    decay_step,
    latency_vs_order,
    run_scenario,
    scenario_from_dict,
    sensor_client,
)
from .quantizer import IntegerController, ScalingProfile, overflow_horizon
from .schemas import (
    CONFIG_SCHEMA,
    FILTER_SCHEMA,
    HE_PARAMS_SCHEMA,
    KEYS_SCHEMA,
    MODEL_SCHEMA,
    PROFILE_SCHEMA,
    SUMMARY_SCHEMA,
    SchemaError,
    load_json,
    validate,
)
from .wire import LossyChannel, ProtocolError, RecordingChannel, SocketChannel, TransportError

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE, EXIT_OVERFLOW, EXIT_TRANSPORT, EXIT_SCHEMA = 0, 1, 2, 3, 4, 5
CONFIG_ENV = "ENCFIR_CONFIG"


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 so that 2 stays reserved for infeasible designs."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if o == float("inf"):
        return "inf"
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _finite(x):
    return "inf" if x == float("inf") else x


# -- loaders ---------------------------------------------------------------------------

def load_model_arg(spec: str) -> StateSpace:
    """``builtin:reactor`` or a model JSON path."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name != "reactor":
            raise SchemaError(f"unknown built-in model {name!r}")
        return benchmark.reactor()
    return model_from_dict(load_json(spec, MODEL_SCHEMA, f"model {spec}"))


def load_filter_arg(spec: str) -> FirFilter:
    """``builtin:<tap set>`` or a filter JSON path."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in benchmark.TAP_SETS:
            raise SchemaError(f"unknown built-in tap set {name!r}; choose from {sorted(benchmark.TAP_SETS)}")
        return benchmark.tap_filter(name)
    return FirFilter.from_dict(load_json(spec, FILTER_SCHEMA, f"filter {spec}"))


def load_params_arg(path: str | None) -> HeParams:
    if path is None:
        return DEFAULT_PARAMS
    return HeParams.from_dict(load_json(path, HE_PARAMS_SCHEMA, f"parameters {path}"))


def _write_json(path, obj, schema=None, what="output") -> None:
    if schema is not None:
        validate(obj, schema, what)
    text = json.dumps(obj, indent=2, default=_json_default)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")


def _config_path(arg: str | None) -> str:
    path = arg or os.environ.get(CONFIG_ENV)
    if not path:
        raise SchemaError(f"no configuration given (use --config or set {CONFIG_ENV})")
    return path


def load_scenario(path: str, keys_path: str | None = None, overrides: dict | None = None):
    cfg = load_json(path, CONFIG_SCHEMA, f"configuration {path}")
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    validate(cfg, CONFIG_SCHEMA, f"configuration {path}")
    keys = None
    keys_path = keys_path or cfg.get("keys")
    if keys_path:
        kp = Path(keys_path)
        if not kp.is_absolute():
            kp = Path(path).parent / kp
        keys = load_keys(validate_keys_file(kp))
        if not isinstance(keys, KeyMaterial):
            raise SchemaError(f"{kp} holds evaluation keys only; the plant side needs the full key set")
    return cfg, scenario_from_dict(cfg, Path(path).parent, keys)


def validate_keys_file(path) -> Path:
    load_json(path, KEYS_SCHEMA, f"keys {path}")
    return Path(path)


def summarize(trace: SimTrace, kind: str) -> dict:
    flags = {}
    for f in trace.flags:
        if f:
            flags[f] = flags.get(f, 0) + 1
    out = {
        "kind": kind,
        "steps": len(trace),
        "final_norm": float(trace.norm_x[-1]) if len(trace) else 0.0,
        "decay_step": decay_step(trace),
        "flags": flags,
    }
    if len(trace):
        lat = trace.latency_ms
        out["latency"] = {"median_ms": float(np.median(lat)), "p99_ms": float(np.percentile(lat, 99)),
                          "max_ms": float(np.max(lat))}
    for key in ("refresh_down", "refresh_up"):
        if key in trace.meta:
            out[key] = trace.meta[key]
    return out


def write_trace(trace: SimTrace, out_dir, stem: str, kind: str) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace.to_csv(out_dir / f"{stem}.csv")
    (out_dir / f"{stem}_norm.dat").write_text(trace.norm_plot_data())
    summary = summarize(trace, kind)
    _write_json(out_dir / f"{stem}_summary.json", summary, SUMMARY_SCHEMA, "summary")
    return summary


# -- subcommands ---------------------------------------------------------------------------

def cmd_design_window(args) -> int:
    ctrl = load_model_arg(args.model)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NotSchurWarning)
        f = window_fir(ctrl, args.order)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    ind = truncation_indicator(ctrl, args.order)
    _write_json(args.out, f.to_dict(), FILTER_SCHEMA, "filter")
    print(f"truncation indicator |C A^N| = {ind:.6g}", file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return EXIT_OK


def _weight(args, ctrl: StateSpace) -> StateSpace:
    if args.weight == "identity":
        return identity_weight(ctrl.n_inputs)
    if args.weight == "inverse":
        return causal_inverse_weight(ctrl)
    if not args.weight_file:
        raise SchemaError("--weight file needs --weight-file")
    return load_model_arg(args.weight_file)


def cmd_design_hinf(args) -> int:
    ctrl = load_model_arg(args.model)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RegularizedInverseWarning)
        weight = _weight(args, ctrl)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    try:
        if args.minimize:
            gamma, design = minimize_gamma(ctrl, weight, args.order)
        else:
            gamma = args.gamma
            design = hinf_fir_design(ctrl, weight, args.order, gamma)
    except InfeasibleDesign as exc:
        _emit({"status": "infeasible", "reason": str(exc), "order": args.order})
        return EXIT_INFEASIBLE
    except lmi.SolverError as exc:
        _emit({"status": "infeasible", "reason": f"solver did not reach a decision: {exc}", "order": args.order})
        return EXIT_INFEASIBLE
    if args.out:
        _write_json(args.out, design.filter.to_dict(), FILTER_SCHEMA, "filter")
    p = design.certificate
    _emit({
        "status": "feasible", "order": args.order, "gamma": gamma, "audit_hinf": design.audit,
        "audit_passes": bool(design.audit < gamma * 1.01),
        "certificate": {"lmi_max_eig": design.lmi_max_eig,
                        "p_min_eig": float(np.linalg.eigvalsh(p).min()) if p.size else 0.0,
                        "p_max_eig": float(np.linalg.eigvalsh(p).max()) if p.size else 0.0},
        "filter": None if args.out else design.filter.to_dict(),
    })
    return EXIT_OK


def cmd_analyze(args) -> int:
    model = load_model_arg(args.model) if args.model else None
    filt = load_filter_arg(args.filter) if args.filter else None
    if args.dims:
        l, m, n = (int(v) for v in args.dims.split(","))
    elif model is not None:
        l, m, n = model.n_inputs, model.n_outputs, model.n_states
    else:
        raise SchemaError("analyze needs --dims or --model")
    out = {"dims": {"l": l, "m": m, "n": n}, "efficient_order_bound": efficient_order_bound(l, m, n)}
    order = filt.order if filt is not None else args.order
    if order is not None:
        fir, iir = opcounts(order, l, m, n)
        out["order"] = order
        out["fir_ops"] = {"multiplications": fir.multiplications, "additions": fir.additions}
        out["iir_ops"] = {"multiplications": iir.multiplications, "additions": iir.additions}
        out["fir_cheaper"] = fir.multiplications < iir.multiplications and fir.additions < iir.additions
    if filt is not None:
        out["depth_audit"] = {mode: depth_audit(filt, mode) for mode in ("partial", "full")}
    if model is not None and args.profile:
        profile = ScalingProfile.from_dict(load_json(args.profile, PROFILE_SCHEMA, f"profile {args.profile}"))
        horizon = overflow_horizon(IntegerController(model, profile), args.y_max, max_steps=args.max_steps)
        out["overflow_horizon"] = _finite(horizon)
    _emit(out)
    return EXIT_OK


def _flag_exit(trace: SimTrace) -> int:
    return EXIT_OVERFLOW if any(f in ("overflow", "noise") for f in trace.flags) else EXIT_OK


def cmd_simulate(args) -> int:
    path = _config_path(args.config)
    cfg, sc = load_scenario(path, args.keys, {"steps": args.steps, "seed": args.seed})
    trace = run_scenario(sc)
    out_dir = args.out_dir or cfg.get("output_dir") or "."
    summary = write_trace(trace, out_dir, "trace", sc.controller.kind)
    _emit(summary)
    return _flag_exit(trace)


def cmd_serve(args) -> int:
    server = CloudServer(args.host, args.port, args.timeout)
    host, port = server.address
    print(f"listening on {host}:{port}", flush=True)
    try:
        server.serve(args.max_sessions)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    for r in server.results:
        print(f"session: {r.steps} steps" + (f", ended with {r.error}" if r.error else ""), flush=True)
    return EXIT_OK


def cmd_sensor(args) -> int:
    path = _config_path(args.config)
    cfg, sc = load_scenario(path, args.keys, {"steps": args.steps, "seed": args.seed})
    if args.host:
        sc.host = args.host
    if args.port is not None:
        sc.port = args.port
    channel = SocketChannel.connect(sc.host, sc.port, sc.timeout)
    if sc.drop is not None:
        channel = LossyChannel(channel, sc.drop, sc.seed + 101)
    log = open(args.frame_log, "wb") if args.frame_log else None
    try:
        if log is not None:
            channel = RecordingChannel(channel, log)
        trace = sensor_client(sc, channel)
    finally:
        if log is not None:
            log.close()
    out_dir = args.out_dir or cfg.get("output_dir") or "."
    _emit(write_trace(trace, out_dir, "trace", sc.controller.kind))
    return _flag_exit(trace)


def cmd_actuator(args) -> int:
    keys = load_keys(validate_keys_file(args.keys))
    if not isinstance(keys, KeyMaterial):
        raise SchemaError("the actuator needs the full key set")
    values = actuator_client(Path(args.frames).read_bytes(), keys, args.s6, args.s7)
    for k, u in enumerate(values):
        print(k, " ".join(repr(float(x)) for x in u))
    return EXIT_OK


def cmd_keygen(args) -> int:
    params = load_params_arg(args.params)
    keys = keygen(params, args.seed)
    for path, obj in ((args.out, keys), (args.eval_out, keys.evaluation_keys() if args.eval_out else None)):
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            save_keys(obj, path)
            validate_keys_file(path)
    print(f"keys for n_r={params.ring_dim}, log2 q_c={params.log_q}, t={params.t} written"
          " (TOY PARAMETERS - no security claim)")
    return EXIT_OK


def cmd_bench(args) -> int:
    params = load_params_arg(args.params)
    out = {"target_ms": acceptance.REAL_TIME_TARGET_MS, "backend": args.backend, "mode": args.mode}
    f = load_filter_arg(args.filter) if args.filter else None
    if f is None:
        rng = np.random.default_rng(args.seed)
        f = FirFilter([rng.uniform(-1, 1, (1, 2)) for _ in range(args.order + 1)])
    be = make_backend(args.backend, params, args.seed)
    ctrl = EncryptedFirController(f, be, args.mode, args.s6, args.s7, args.y_max, precompute=args.precompute)
    stats = bench_step_latency(ctrl, args.steps, seed=args.seed)
    out.update(order=f.order, **stats.to_dict())
    out["meets_target"] = stats.median_ms < acceptance.REAL_TIME_TARGET_MS
    if args.orders:
        orders = [int(v) for v in args.orders.split(",")]
        out["scaling"] = latency_vs_order(orders, args.mode, args.backend, max(3, args.steps // 4), params, args.seed)
    _emit(out)
    print(f"median {stats.median_ms:.2f} ms vs target {acceptance.REAL_TIME_TARGET_MS:.0f} ms: "
          f"{'below' if out['meets_target'] else 'above'} (p99 {stats.p99_ms:.2f} ms)")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plant = benchmark.reactor()
    keys = keygen(DEFAULT_PARAMS, args.seed) if args.backend == "bfv" else None
    y_max = [float(v) for v in args.y_max.split(",")]
    report = {"closed_loops": {}, "encrypted": {},
              "encryption": {"s6": args.s6, "s7": args.s7, "y_max": y_max, "headroom": args.headroom}}
    for name, f in benchmark.all_filters().items():
        _, schur, radius = closed_loop_matrix(plant, fir_to_statespace(f))
        plain = run_scenario(Scenario(plant, ControllerSpec("fir", filter=f), args.steps, seed=args.seed))
        report["closed_loops"][name] = {"schur": schur, "spectral_radius": radius,
                                        **write_trace(plain, out_dir, f"plain_{name}", "fir")}
        enc = EncryptionConfig(backend=args.backend, mode="full", s6=args.s6, s7=args.s7, y_max=y_max,
                               headroom=args.headroom, keys=keys)
        trace = run_scenario(Scenario(plant, ControllerSpec("encrypted-fir", filter=f, encryption=enc),
                                      args.encrypted_steps, seed=args.seed))
        report["encrypted"][name] = write_trace(trace, out_dir, f"encrypted_{name}", "encrypted-fir")
    zero = run_scenario(Scenario(plant, ControllerSpec("zero"), 50))
    report["open_loop_norm_at_50"] = float(zero.norm_x[-1])
    ctrl = EncryptedFirController(benchmark.tap_filter("window-n7"), make_backend(args.backend, DEFAULT_PARAMS,
                                  args.seed, keys), "full", args.s6, args.s7, y_max, headroom=args.headroom)
    stats = bench_step_latency(ctrl, args.bench_steps, seed=args.seed)
    report["latency_window_n7_full"] = {**stats.to_dict(), "target_ms": acceptance.REAL_TIME_TARGET_MS}
    results = acceptance.run_all(quick=not args.full) if not args.skip_criteria else []
    report["criteria"] = [{"number": r.number, "name": r.name, "passed": r.passed, "asserted": r.asserted,
                           "detail": r.detail} for r in results]
    _write_json(out_dir / "report.json", report)
    for name, info in report["closed_loops"].items():
        print(f"{name}: closed-loop spectral radius {info['spectral_radius']:.3f}, "
              f"stabilizing={info['schur']}, |x| < 10% of |x(0)| from step {info['decay_step']}")
    print(f"window-n7 full-mode latency: median {stats.median_ms:.1f} ms, p99 {stats.p99_ms:.1f} ms "
          f"(target {acceptance.REAL_TIME_TARGET_MS:.0f} ms)")
    for r in results:
        print(r.line())
    failed = [r for r in results if r.asserted and not r.passed]
    return EXIT_ERROR if failed else EXIT_OK


# -- parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="encfir", description="FIR-based encrypted control: design, analysis and simulation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("design-window", help="window FIR from the Markov parameters")
    s.add_argument("--model", required=True, help="controller JSON or builtin:reactor")
    s.add_argument("--order", type=int, required=True)
    s.add_argument("--out", help="filter JSON path (stdout if omitted)")
    s.set_defaults(func=cmd_design_window)

    s = sub.add_parser("design-hinf", help="H-infinity optimal FIR taps via the bounded-real LMI")
    s.add_argument("--model", required=True)
    s.add_argument("--weight", choices=("inverse", "identity", "file"), default="inverse")
    s.add_argument("--weight-file")
    s.add_argument("--order", type=int, required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--gamma", type=float)
    g.add_argument("--minimize", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_design_hinf)

    s = sub.add_parser("analyze", help="operation counts, efficiency bound, overflow horizon, depth")
    s.add_argument("--model")
    s.add_argument("--filter")
    s.add_argument("--dims", help="l,m,n")
    s.add_argument("--order", type=int)
    s.add_argument("--profile", help="scaling profile JSON for the overflow horizon")
    s.add_argument("--y-max", type=float, default=1.0)
    s.add_argument("--max-steps", type=int, default=10_000)
    s.set_defaults(func=cmd_analyze)

    for name, func, text in (("simulate", cmd_simulate, "run a scenario in process"),
                             ("sensor", cmd_sensor, "plant-side client against a running cloud")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help=f"scenario JSON (default: ${CONFIG_ENV})")
        s.add_argument("--keys", help="full key file for encrypted scenarios")
        s.add_argument("--steps", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--out-dir")
        if name == "sensor":
            s.add_argument("--host")
            s.add_argument("--port", type=int)
            s.add_argument("--frame-log", help="append received CONTROL_ACTION frames to this file")
        s.set_defaults(func=func)

    s = sub.add_parser("serve", help="cloud role: evaluate encrypted sessions over TCP")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=5757)
    s.add_argument("--max-sessions", type=int)
    s.add_argument("--timeout", type=float, default=60.0)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("actuator", help="decrypt a CONTROL_ACTION frame log")
    s.add_argument("--keys", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--s6", type=float, required=True)
    s.add_argument("--s7", type=float, required=True)
    s.set_defaults(func=cmd_actuator)

    s = sub.add_parser("keygen", help="deterministic BFV key generation")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--params", help="HeParams JSON (defaults: n_r=256, q_c=2^64, t=2^20)")
    s.add_argument("--out", required=True, help="full key set")
    s.add_argument("--eval-out", help="evaluation keys only (for the cloud)")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("bench", help="per-step latency of the encrypted FIR evaluation")
    s.add_argument("--order", type=int, default=7)
    s.add_argument("--filter")
    s.add_argument("--mode", choices=("partial", "full"), default="full")
    s.add_argument("--backend", choices=("bfv", "mock"), default="bfv")
    s.add_argument("--steps", type=int, default=30)
    s.add_argument("--s6", type=float, default=8.0)
    s.add_argument("--s7", type=float, default=8.0)
    s.add_argument("--y-max", type=float, default=10.0)
    s.add_argument("--precompute", action="store_true")
    s.add_argument("--orders", help="comma-separated orders for the latency-vs-N fit")
    s.add_argument("--params")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("reproduce-benchmark", help="batch-reactor benchmark end to end")
    s.add_argument("--out-dir", default="benchmark_out")
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--encrypted-steps", type=int, default=100)
    s.add_argument("--bench-steps", type=int, default=20)
    s.add_argument("--backend", choices=("bfv", "mock"), default="bfv")
    s.add_argument("--s6", type=float, default=16.0)
    s.add_argument("--s7", type=float, default=16.0)
    s.add_argument("--y-max", default="12,200", help="bound on |y|, one entry per output")
    s.add_argument("--headroom", choices=("product", "exact"), default="exact")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--full", action="store_true", help="run the acceptance checks at full size")
    s.add_argument("--skip-criteria", action="store_true")
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (KeyError, ValueError) as exc:
        if isinstance(exc, (ProtocolError, HeadroomError)):
            code = EXIT_TRANSPORT if isinstance(exc, ProtocolError) else EXIT_OVERFLOW
            print(f"error: {exc}", file=sys.stderr)
            return code
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (MagnitudeOverflow, LevelError, OverflowError) as exc:
        print(f"overflow: {exc}", file=sys.stderr)
        return EXIT_OVERFLOW
    except (TransportError, RefreshMissed) as exc:
        step = getattr(exc, "step", None)
        print(f"transport failure{'' if step is None else f' at step {step}'}: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
