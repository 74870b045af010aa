"""Built-in batch-reactor benchmark: plant, initial state and published taps.

Provenance: the discretized chemical batch reactor (sampling period 0.1)
and the three FIR tap tables are the published benchmark values; the taps
are printed with two decimals and are used as printed.

The published output matrix lists the rows ``(0 1 0 0)`` and
``(1 0 1 -1)``.  With that order none of the published tap tables
stabilizes the loop, while with the rows swapped all three do (spectral
radii 0.686, 0.745 and 0.818).  The tap columns are therefore paired with
the outputs ``y1 = x1 + x3 - x4`` and ``y2 = x2``, and :data:`C_PUBLISHED`
keeps the printed order for reference.
"""

from __future__ import annotations

import numpy as np

from .fir import FirFilter
from .lti import StateSpace

DT = 0.1

A = np.array([
    [1.18, 0.00, 0.51, -0.40],
    [-0.05, 0.66, -0.01, 0.06],
    [0.08, 0.34, 0.56, 0.38],
    [0.00, 0.34, 0.09, 0.85],
])
B = np.array([[0.00], [0.47], [0.21], [0.21]])
C_PUBLISHED = np.array([
    [0.0, 1.0, 0.0, 0.0],
    [1.0, 0.0, 1.0, -1.0],
])
C = C_PUBLISHED[::-1].copy()
D = np.zeros((2, 1))

X0 = -np.array([6.83, 5.18, 4.05, 3.12])

#: window-based approximation of the T = 8 reset controller, N = 7
WINDOW_N7 = [[-49.00, -2.33], [50.99, 0.17], [-7.31, 0.04], [-2.42, -0.02],
             [0.88, 0.00], [0.03, 0.00], [-0.07, 0.00], [0.01, 0.00]]
#: optimization-based design, N = 2, gamma = 0.06
OPTIMIZED_N2 = [[-48.93, -2.33], [50.93, 0.17], [-8.81, 0.04]]
#: replacement for the unstable T = 25 reset controller, N = 2
REPLACEMENT_N2 = [[-17.54, -3.04], [-4.44, -0.96], [17.60, -0.23]]

TAP_SETS = {"window-n7": WINDOW_N7, "optimized-n2": OPTIMIZED_N2, "replacement-n2": REPLACEMENT_N2}

#: reset periods of the two reference reset controllers
RESET_PERIODS = {"C1": 25, "C2": 8}


def reactor(x0=X0) -> StateSpace:
    return StateSpace(A, B, C, D, x0=np.asarray(x0, dtype=float), dt=DT)


def tap_filter(name: str) -> FirFilter:
    """One of :data:`TAP_SETS` as a 1 x 2 FIR filter."""
    rows = TAP_SETS[name]
    return FirFilter([np.array([r], dtype=float) for r in rows])


def all_filters() -> dict:
    return {name: tap_filter(name) for name in TAP_SETS}
