"""Window and H-infinity FIR approximations of a stable IIR controller.

Prints the window truncation error and the optimal gamma for growing order.
"""

import numpy as np

from encfir.fir import (causal_inverse_weight, assemble_error_system, minimize_gamma, truncation_indicator,
                        window_fir)
from encfir.lti import StateSpace, hinf_norm

ctrl = StateSpace([[0.7, 0.2], [-0.1, 0.5]], [[1.0], [0.5]], [[0.4, -0.3]], [[1.0]])
weight = causal_inverse_weight(ctrl)

print(" N   window |e|_inf   |C A^N|   optimal gamma (inverse weight)")
for n in (1, 2, 4, 8):
    f = window_fir(ctrl, n)
    e = hinf_norm(assemble_error_system(ctrl, f, weight), 1024)
    gamma, design = minimize_gamma(ctrl, weight, n)
    print(f"{n:2d}   {e:14.4g}   {truncation_indicator(ctrl, n):8.3g}   {gamma:.4g}"
          f" (audit {design.audit:.4g})")
print("first taps of the N = 8 window filter:", np.round(np.ravel(window_fir(ctrl, 8).taps[:4]), 4))
