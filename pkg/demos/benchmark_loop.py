"""Batch-reactor loop closed by the three published FIR tap sets, plain and encrypted.

Run ``python3 demos/benchmark_loop.py [--bfv] [--steps 100]``.  Writes
``<name>_norm.dat`` files (``k  |x(k)|``) next to the current directory.
"""

import argparse

import numpy as np

from encfir import benchmark
from encfir.fir import fir_to_statespace
from encfir.he_backend import DEFAULT_PARAMS, keygen
from encfir.loop_service import (ControllerSpec, EncryptionConfig, Scenario, closed_loop_matrix,
                                 decay_step, run_scenario)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--bfv", action="store_true", help="use the lattice backend instead of the mock")
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args()

    plant = benchmark.reactor()
    keys = keygen(DEFAULT_PARAMS, 0) if args.bfv else None
    zero = run_scenario(Scenario(plant, ControllerSpec("zero"), args.steps))
    print(f"open loop: |x| grows from {zero.norm_x[0]:.2f} to {zero.norm_x[-1]:.3g}")

    for name, f in benchmark.all_filters().items():
        _, schur, rho = closed_loop_matrix(plant, fir_to_statespace(f))
        plain = run_scenario(Scenario(plant, ControllerSpec("fir", filter=f), args.steps))
        enc = EncryptionConfig(backend="bfv" if args.bfv else "mock", s6=16.0, s7=16.0,
                               y_max=[12.0, 200.0], headroom="exact", keys=keys)
        secret = run_scenario(Scenario(plant, ControllerSpec("encrypted-fir", filter=f, encryption=enc), args.steps))
        with open(f"{name}_norm.dat", "w") as fh:
            fh.write(secret.norm_plot_data())
        print(f"{name:15s} rho={rho:.3f} schur={schur}  10% decay: plain k={decay_step(plain)}, "
              f"encrypted k={decay_step(secret)}, final encrypted |x|={secret.norm_x[-1]:.3f}, "
              f"median step {np.median(secret.latency_ms):.2f} ms")


if __name__ == "__main__":
    main()
