"""External state refresh needs a round trip every T steps; the FIR controller does not.

A lost refresh message stops the refresh-based loop, while the FIR loop
runs for as long as the plant does, with no state held in ciphertexts.
"""

import numpy as np

from encfir.baselines import RefreshMissed
from encfir.fir import window_fir
from encfir.he_backend import HeParams
from encfir.loop_service import ControllerSpec, EncryptionConfig, Scenario, run_scenario
from encfir.lti import StateSpace
from encfir.quantizer import ScalingProfile
from encfir.wire import DropPolicy, MsgType

PARAMS = HeParams(ring_dim=16, t=2**62, q_c=2**64)

plant = StateSpace([[0.8]], [[1.0]], [[1.0]], [[0.0]], [1.0])
model = StateSpace([[0.5, 0.1], [0.0, 0.4]], [[1.0], [0.3]], [[-0.6, 0.2]], [[-0.3]])


def refresh_loop(steps, drop=None):
    enc = EncryptionConfig(backend="mock", params=PARAMS)
    spec = ControllerSpec("refresh", model=model, period=5, profile=ScalingProfile.uniform(20.0, 2**62),
                          encryption=enc)
    return run_scenario(Scenario(plant, spec, steps, refresh_timeout=0.5, drop=drop))


tr = refresh_loop(40)
print(f"refresh loop, no loss: {len(tr.meta['refresh_down'])} refresh round trips in {len(tr)} steps, "
      f"final |x| = {tr.norm_x[-1]:.2e}")

try:
    refresh_loop(40, DropPolicy(types=(MsgType.STATE_REFRESH_DOWN,), after=3))
except RefreshMissed as exc:
    print(f"refresh loop with the 4th refresh lost: stopped at step {exc.step} ({exc})")

f = window_fir(model, 12)
enc = EncryptionConfig(backend="mock", params=HeParams(ring_dim=16, t=2**20), s6=64.0, s7=64.0, y_max=2.0,
                       headroom="exact")
tr = run_scenario(Scenario(plant, ControllerSpec("encrypted-fir", filter=f, encryption=enc), 2000))
print(f"encrypted FIR (N=12): {len(tr)} steps, refresh messages sent: "
      f"{tr.meta['sent'].get(MsgType.STATE_REFRESH_UP, 0)}, final |x| = {tr.norm_x[-1]:.2e}, "
      f"flags: {sorted(set(tr.flags) - {''}) or 'none'}, max |x| over the last 100 steps "
      f"{np.max(tr.norm_x[-100:]):.2e}")
