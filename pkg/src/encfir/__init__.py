"""FIR filter-based encrypted control.

Modules
-------
lti            discrete-time state-space systems and norms
quantizer      scale-and-round quantization, integer controllers, overflow horizons
fir            window and H-infinity FIR designs of dynamic controllers
lmi            small log-barrier LMI solver used by the H-infinity design
he_backend     textbook BFV scheme and an exact mock backend
encrypted_fir  homomorphic evaluation of quantized FIR laws
baselines      reset controllers and external state refresh
wire           framed messages and transports
loop_service   closed-loop runner, cloud and plant roles, latency bench
benchmark      built-in batch-reactor data
"""

__version__ = "0.1.0"
