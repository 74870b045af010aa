"""Encrypted loop over TCP: a cloud server thread and the plant-side client.

The cloud receives evaluation keys only; every sensor and actuator value
crosses the socket as a BFV ciphertext.
"""

import threading

from encfir import benchmark
from encfir.he_backend import DEFAULT_PARAMS, keygen
from encfir.loop_service import CloudServer, ControllerSpec, EncryptionConfig, Scenario, sensor_client

keys = keygen(DEFAULT_PARAMS, seed=5)
server = CloudServer(port=0)
worker = threading.Thread(target=server.serve, args=(1,), daemon=True)
worker.start()
host, port = server.address

enc = EncryptionConfig(backend="bfv", mode="full", s6=16.0, s7=16.0, y_max=[12.0, 200.0], headroom="exact",
                       keys=keys)
spec = ControllerSpec("encrypted-fir", filter=benchmark.tap_filter("window-n7"), encryption=enc)
trace = sensor_client(Scenario(benchmark.reactor(), spec, 40, host=host, port=port, seed=5))
worker.join()
server.close()

session = server.results[0].session
print(f"{len(trace)} steps over {host}:{port}, {trace.meta['bytes_sent']} bytes sent by the plant")
print(f"cloud backend can decrypt: {session.backend.can_decrypt}")
print(f"|x(0)| = {trace.norm_x[0]:.2f}, |x(39)| = {trace.norm_x[-1]:.3f}")
lat = sorted(trace.latency_ms)
print(f"round-trip step latency: median {lat[len(lat) // 2]:.1f} ms, max {lat[-1]:.1f} ms (target 100 ms)")
