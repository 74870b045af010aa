"""Leveled homomorphic arithmetic on integers.

Two interchangeable backends share one interface:

* :class:`BfvBackend` -- textbook BFV over ``Z_q[X]/(X^n + 1)`` with a power
  of two ciphertext modulus, ternary secret, centered binomial noise and
  base-``w`` relinearization.  One ciphertext-ciphertext multiplication level
  is the intended use.
* :class:`MockBackend` -- exact integer payloads with a depth counter and a
  magnitude check against the plaintext modulus.  It is the semantic oracle of
  the real scheme.

Scalars are encoded in coefficient 0 of the plaintext polynomial.  The
parameters are toy parameters: no security level is claimed.

Polynomial products are computed exactly over the integers and then reduced.
Three routes are available and cross-checked in the tests: Kronecker
substitution on Python integers (default), schoolbook convolution and a
multi-prime NTT with CRT reconstruction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TOY_PARAMETERS_NOTICE = "TOY PARAMETERS - no security claim"


class HeError(RuntimeError):
    """Base class of homomorphic evaluation errors."""


class LevelError(HeError):
    """Multiplicative depth would exceed the number of levels, or levels differ."""


class ParamsMismatch(HeError):
    """Operands belong to different parameter sets."""


class MagnitudeOverflow(HeError):
    """A payload left the centered plaintext range of ``Z_t``."""


class NoiseOverflow(HeError):
    """Decryption noise reached the correctness limit ``q_c / (2 t)``."""


class MissingSecretKey(HeError):
    """Decryption was requested from a role that holds evaluation keys only."""


class WireFormatError(ValueError):
    """A ciphertext byte string is malformed."""


# -- parameters ---------------------------------------------------------------------

@dataclass(frozen=True)
class HeParams:
    """BFV parameters.

    Parameters
    ----------
    ring_dim : int
        Ring dimension ``n_r``, a power of two.
    q_c : int
        Ciphertext modulus, a power of two not above ``2**64`` so that
        coefficients fit the unsigned 64-bit wire words.
    t : int
        Plaintext modulus; it must divide ``q_c``.
    sigma : float
        Target standard deviation of the error distribution.
    base : int
        Relinearization decomposition base ``w`` (a power of two).
    levels : int
        Supported multiplicative depth ``L``.
    """

    ring_dim: int = 256
    q_c: int = 2**64
    t: int = 2**20
    sigma: float = 3.2
    base: int = 2**8
    levels: int = 1

    def __post_init__(self):
        n = self.ring_dim
        if n < 2 or n & (n - 1):
            raise ValueError("ring dimension must be a power of two")
        if self.q_c < 4 or self.q_c & (self.q_c - 1) or self.q_c > 2**64:
            raise ValueError("ciphertext modulus must be a power of two in [4, 2**64]")
        if not 1 < self.t < self.q_c or self.q_c % self.t:
            raise ValueError("plaintext modulus must divide q_c and satisfy 1 < t < q_c")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.base < 2 or self.base & (self.base - 1):
            raise ValueError("relinearization base must be a power of two")
        if self.levels < 1:
            raise ValueError("at least one level is required")

    @property
    def log_q(self) -> int:
        return self.q_c.bit_length() - 1

    @property
    def delta(self) -> int:
        return self.q_c // self.t

    @property
    def digits(self) -> int:
        """Number of base-``w`` digits of a residue mod ``q_c``."""
        b = self.base.bit_length() - 1
        return -(-self.log_q // b)

    @property
    def eta(self) -> int:
        """Centered binomial parameter with variance ``eta / 2`` close to ``sigma**2``."""
        return max(1, round(2 * self.sigma**2))

    @property
    def noise_budget(self) -> float:
        """Decryption is correct while the noise stays below this value."""
        return self.q_c / (2 * self.t)

    def to_dict(self) -> dict:
        return {"ring_dim": self.ring_dim, "q_c": str(self.q_c), "t": str(self.t),
                "sigma": self.sigma, "base": self.base, "levels": self.levels}

    @classmethod
    def from_dict(cls, d: dict) -> "HeParams":
        return cls(int(d["ring_dim"]), int(d["q_c"]), int(d["t"]), float(d["sigma"]),
                   int(d["base"]), int(d["levels"]))


# -- exact negacyclic products ------------------------------------------------------

# primes p < 2**31 with p = 1 mod 2**14, and a generator of Z_p^* for each
_NTT_PRIMES = ((2147352577, 5), (2147205121, 7), (2147074049, 11), (2146959361, 19),
               (2146713601, 11), (2146418689, 19), (2146336769, 3), (2146091009, 3))


def _as_int_list(a) -> list:
    # np.asarray would turn a list mixing huge and small ints into floats
    if isinstance(a, np.ndarray):
        a = a.reshape(-1).tolist()
    return [int(v) for v in a]


def _fold(c: list, n: int) -> list:
    """Reduce a length ``2n-1`` linear convolution modulo ``X^n + 1``."""
    out = list(c[:n])
    for i in range(n, len(c)):
        out[i - n] -= c[i]
    return out


def negacyclic_schoolbook(a, b) -> list:
    """Exact product of two integer coefficient vectors in ``Z[X]/(X^n + 1)``."""
    a = np.array(_as_int_list(a), dtype=object)
    b = np.array(_as_int_list(b), dtype=object)
    if a.shape != b.shape:
        raise ValueError("operands must have equal length")
    return _fold(list(np.convolve(a, b)), len(a))


def _slot_bytes(bits: int) -> int:
    return (bits + 1) // 8 + 1


def _pack(vals: list, slot: int) -> int:
    pos = b"".join((v if v > 0 else 0).to_bytes(slot, "little") for v in vals)
    neg = b"".join((-v if v < 0 else 0).to_bytes(slot, "little") for v in vals)
    return int.from_bytes(pos, "little") - int.from_bytes(neg, "little")


def _pack_u64(a: np.ndarray, slot: int) -> int:
    buf = np.zeros((a.shape[0], slot), dtype=np.uint8)
    buf[:, :8] = a.astype("<u8").view(np.uint8).reshape(-1, 8)
    return int.from_bytes(buf.tobytes(), "little")


def _unpack(z: int, count: int, slot: int) -> list:
    """Inverse of :func:`_pack` for signed digits below ``2**(8 slot - 1)``."""
    half = 1 << (8 * slot - 1)
    offset = int.from_bytes(half.to_bytes(slot, "little") * count, "little")
    raw = (z + offset).to_bytes(count * slot, "little")
    return [int.from_bytes(raw[i * slot:(i + 1) * slot], "little") - half for i in range(count)]


def negacyclic_kronecker(a, b) -> list:
    """Exact negacyclic product by Kronecker substitution on Python integers."""
    a, b = _as_int_list(a), _as_int_list(b)
    n = len(a)
    if len(b) != n:
        raise ValueError("operands must have equal length")
    ma = max((abs(v) for v in a), default=0)
    mb = max((abs(v) for v in b), default=0)
    bits = (ma * mb * n).bit_length() + 1
    slot = _slot_bytes(bits)
    z = _pack(a, slot) * _pack(b, slot)
    return _fold(_unpack(z, 2 * n - 1, slot), n)


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for i in range(bits):
        rev |= ((idx >> i) & 1) << (bits - 1 - i)
    return rev


def _ntt(a: np.ndarray, omega: int, p: int) -> np.ndarray:
    """Iterative radix-2 cyclic NTT of a length ``n`` vector of residues."""
    n = a.shape[0]
    a = a[_bit_reverse(n)].copy()
    h = 1
    while h < n:
        w_h = pow(omega, n // (2 * h), p)
        tw = np.array([pow(w_h, j, p) for j in range(h)], dtype=np.int64)
        blocks = a.reshape(n // (2 * h), 2, h)
        even = blocks[:, 0, :]
        odd = blocks[:, 1, :] * tw % p
        a = np.concatenate([(even + odd) % p, (even - odd) % p], axis=1).reshape(n)
        h *= 2
    return a


def _negacyclic_mod_p(a: np.ndarray, b: np.ndarray, p: int, g: int) -> np.ndarray:
    n = a.shape[0]
    psi = pow(g, (p - 1) // (2 * n), p)  # primitive 2n-th root of unity
    omega = psi * psi % p
    pw = np.array([pow(psi, i, p) for i in range(n)], dtype=np.int64)
    fa = _ntt(a * pw % p, omega, p)
    fb = _ntt(b * pw % p, omega, p)
    c = _ntt(fa * fb % p, pow(omega, p - 2, p), p)
    inv = np.array([pow(n * pow(psi, i, p) % p, p - 2, p) for i in range(n)], dtype=np.int64)
    return c * inv % p


def negacyclic_ntt(a, b) -> list:
    """Exact negacyclic product through NTTs modulo several 31-bit primes and CRT."""
    ai, bi = _as_int_list(a), _as_int_list(b)
    n = len(ai)
    if len(bi) != n:
        raise ValueError("operands must have equal length")
    if (2 * n) > 2**14:
        raise ValueError("ring dimension too large for the built-in NTT primes")
    ma = max((abs(v) for v in ai), default=0)
    mb = max((abs(v) for v in bi), default=0)
    need = 2 * n * ma * mb + 1
    primes, modulus = [], 1
    for p, g in _NTT_PRIMES:
        if modulus > need:
            break
        primes.append((p, g))
        modulus *= p
    if modulus <= need:
        raise ValueError("operands too large for the built-in NTT primes")
    residues = []
    for p, g in primes:
        ra = np.array([v % p for v in ai], dtype=np.int64)
        rb = np.array([v % p for v in bi], dtype=np.int64)
        residues.append(_negacyclic_mod_p(ra, rb, p, g).tolist())
    out = []
    for i in range(n):
        x = 0
        for (p, _), r in zip(primes, residues):
            mp = modulus // p
            x += r[i] * mp * pow(mp, -1, p)
        x %= modulus
        out.append(x - modulus if x > modulus // 2 else x)
    return out


POLYMUL_METHODS = {
    "kronecker": negacyclic_kronecker,
    "schoolbook": negacyclic_schoolbook,
    "ntt": negacyclic_ntt,
}


# -- plaintexts and ciphertexts -------------------------------------------------------

@dataclass(frozen=True)
class Plaintext:
    """Coefficient vector over ``Z_t`` in centered representation."""

    coeffs: tuple
    t: int

    @classmethod
    def from_coeffs(cls, coeffs, t: int, ring_dim: int) -> "Plaintext":
        vals = _as_int_list(coeffs)
        if len(vals) > ring_dim:
            raise ValueError("too many coefficients for the ring dimension")
        vals = vals + [0] * (ring_dim - len(vals))
        lo, hi = -(t // 2), (t + 1) // 2 - 1
        if any(v < lo or v > hi for v in vals):
            raise MagnitudeOverflow(f"plaintext coefficient outside [{lo}, {hi}]")
        return cls(tuple(vals), t)

    @classmethod
    def scalar(cls, value: int, t: int, ring_dim: int) -> "Plaintext":
        return cls.from_coeffs([int(value)], t, ring_dim)

    @property
    def value(self) -> int:
        """The scalar carried in coefficient 0."""
        return self.coeffs[0]

    def l1(self) -> int:
        return sum(abs(v) for v in self.coeffs)


@dataclass
class Ciphertext:
    """BFV ciphertext: 2 (or 3 before relinearization) polynomials mod ``q_c``."""

    polys: tuple  # uint64 arrays of length ring_dim
    level: int
    params: HeParams
    noise_bound: float = 0.0  # tracked heuristic bound, see module notes

    @property
    def size(self) -> int:
        return len(self.polys)

    def to_bytes(self) -> bytes:
        """Wire form: u32 length, u8 polynomial count, u8 level, u64 coefficients (little endian)."""
        body = struct.pack("<BB", self.size, self.level)
        body += b"".join(np.asarray(p, dtype="<u8").tobytes() for p in self.polys)
        return struct.pack("<I", len(body)) + body

    @classmethod
    def from_bytes(cls, data: bytes, params: HeParams) -> "Ciphertext":
        ct, used = cls.read_from(data, params)
        if used != len(data):
            raise WireFormatError("trailing bytes after ciphertext")
        return ct

    @classmethod
    def read_from(cls, data: bytes, params: HeParams, offset: int = 0):
        """Parse one ciphertext at ``offset``; returns it with the end offset."""
        if len(data) - offset < 6:
            raise WireFormatError("truncated ciphertext header")
        (length,) = struct.unpack_from("<I", data, offset)
        count, level = struct.unpack_from("<BB", data, offset + 4)
        n = params.ring_dim
        if count not in (2, 3) or length != 2 + 8 * n * count:
            raise WireFormatError("ciphertext length does not match its header")
        end = offset + 4 + length
        if end > len(data):
            raise WireFormatError("truncated ciphertext body")
        words = np.frombuffer(data, dtype="<u8", count=n * count, offset=offset + 6)
        if params.q_c < 2**64 and np.any(words >= np.uint64(params.q_c)):
            raise WireFormatError("coefficient not reduced modulo q_c")
        polys = tuple(words[i * n:(i + 1) * n].astype(np.uint64) for i in range(count))
        return cls(polys, level, params), end


# -- keys -------------------------------------------------------------------------

@dataclass
class EvaluationKeys:
    """Public material needed by an evaluating party; cannot decrypt."""

    params: HeParams
    public: tuple  # (pk0, pk1)
    relin: tuple  # ((rk0_i, rk1_i) for each digit)

    def to_dict(self) -> dict:
        return {
            "notice": TOY_PARAMETERS_NOTICE,
            "params": self.params.to_dict(),
            "public": [np.asarray(p).tolist() for p in self.public],
            "relin": [[np.asarray(p).tolist() for p in pair] for pair in self.relin],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationKeys":
        params = HeParams.from_dict(d["params"])
        public = tuple(np.array(p, dtype=np.uint64) for p in d["public"])
        relin = tuple(tuple(np.array(p, dtype=np.uint64) for p in pair) for pair in d["relin"])
        return cls(params, public, relin)


@dataclass
class KeyMaterial(EvaluationKeys):
    """Full key set; regenerable from ``seed``."""

    secret: np.ndarray = field(default=None, repr=False)  # ternary, int64
    seed: int = 0

    def evaluation_keys(self) -> EvaluationKeys:
        return EvaluationKeys(self.params, self.public, self.relin)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["seed"] = self.seed
        d["secret"] = np.asarray(self.secret).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KeyMaterial":
        base = EvaluationKeys.from_dict(d)
        return cls(base.params, base.public, base.relin,
                   np.array(d["secret"], dtype=np.int64), int(d["seed"]))


def save_keys(keys: EvaluationKeys, path) -> None:
    Path(path).write_text(json.dumps(keys.to_dict()))


def load_keys(path) -> EvaluationKeys:
    d = json.loads(Path(path).read_text())
    return KeyMaterial.from_dict(d) if "secret" in d else EvaluationKeys.from_dict(d)


def _mask(params: HeParams) -> int:
    return params.q_c - 1


def _to_u64(vals, params: HeParams) -> np.ndarray:
    m = _mask(params)
    return np.array([int(v) & m for v in vals], dtype=np.uint64)


def _reduce(a: np.ndarray, params: HeParams) -> np.ndarray:
    # uint64 arithmetic wraps mod 2**64, and q_c divides 2**64
    if params.q_c == 2**64:
        return a
    return a & np.uint64(params.q_c - 1)


def _centered(vals: list, modulus: int) -> list:
    half = modulus // 2
    return [((v + half) % modulus) - half for v in vals]


def _sample_uniform(rng: np.random.Generator, params: HeParams) -> np.ndarray:
    return rng.integers(0, params.q_c, size=params.ring_dim, dtype=np.uint64, endpoint=False)


def _sample_ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, size=n).astype(np.int64)


def _sample_cbd(rng: np.random.Generator, params: HeParams) -> np.ndarray:
    eta = params.eta
    bits = rng.integers(0, 2, size=(2, params.ring_dim, eta))
    return (bits[0].sum(axis=1) - bits[1].sum(axis=1)).astype(np.int64)


def _signed_u64(vals: np.ndarray, params: HeParams) -> np.ndarray:
    """Small signed integers as residues mod ``q_c``."""
    return _reduce(vals.astype(np.int64).view(np.uint64), params)


def keygen(params: HeParams, seed: int) -> KeyMaterial:
    """Deterministic key generation from ``seed``."""
    rng = np.random.default_rng([int(seed), 0x6B6579])
    n = params.ring_dim
    s = _sample_ternary(rng, n)
    s_list = s.tolist()
    a = _sample_uniform(rng, params)
    e = _sample_cbd(rng, params)
    a_s = negacyclic_kronecker(a.tolist(), s_list)
    pk0 = _to_u64([-(x + y) for x, y in zip(a_s, e.tolist())], params)
    s2 = negacyclic_kronecker(s_list, s_list)
    relin = []
    wpow = 1
    for _ in range(params.digits):
        ai = _sample_uniform(rng, params)
        ei = _sample_cbd(rng, params)
        ai_s = negacyclic_kronecker(ai.tolist(), s_list)
        rk0 = _to_u64([-(x + y) + wpow * z for x, y, z in zip(ai_s, ei.tolist(), s2)], params)
        relin.append((rk0, ai))
        wpow *= params.base
    return KeyMaterial(params, (pk0, a), tuple(relin), s, int(seed))


# -- backends ---------------------------------------------------------------------

def _check_params(a, b):
    if a.params != b.params:
        raise ParamsMismatch("operands use different parameters")


def _check_pair(a, b):
    _check_params(a, b)
    if a.level != b.level:
        raise LevelError(f"level mismatch ({a.level} vs {b.level})")


class BfvBackend:
    """BFV evaluation bound to one key set and one seeded randomness stream.

    A backend built from :class:`EvaluationKeys` can encrypt and evaluate but
    refuses to decrypt.
    """

    name = "bfv"

    def __init__(self, keys: EvaluationKeys, seed: int = 0, polymul: str = "kronecker"):
        self.params = keys.params
        self.keys = keys
        self.rng = np.random.default_rng([int(seed), 0x656E63])
        if polymul not in POLYMUL_METHODS:
            raise ValueError(f"unknown polynomial multiplication method {polymul!r}")
        self.polymul = polymul
        self.max_level = 0
        p = self.params
        # slot width for packed sums of products: digits below 2**(8 slot - 1)
        self._slot = _slot_bytes(2 * p.log_q + p.ring_dim.bit_length() + 16)
        self._relin_packed = tuple(
            (_pack_u64(r0, self._slot), _pack_u64(r1, self._slot)) for r0, r1 in keys.relin)
        n = p.ring_dim
        eta = p.eta
        # heuristic high-probability noise constants (6 standard deviations)
        self._fresh_bound = 6.0 * math.sqrt(eta / 2.0) * math.sqrt(1.0 + 4.0 * n / 3.0)
        self._relin_bound = 6.0 * math.sqrt(p.digits * n * (p.base**2 / 12.0) * eta / 2.0)

    # plaintext helpers
    def encode(self, value: int) -> Plaintext:
        return Plaintext.scalar(value, self.params.t, self.params.ring_dim)

    def encode_vector(self, values) -> Plaintext:
        return Plaintext.from_coeffs(values, self.params.t, self.params.ring_dim)

    def read_ciphertext(self, data: bytes, offset: int = 0):
        """Parse one wire-form ciphertext; the tracked noise bound is not transmitted."""
        return Ciphertext.read_from(data, self.params, offset)

    @property
    def can_decrypt(self) -> bool:
        return isinstance(self.keys, KeyMaterial)

    # core operations
    def _mul_exact(self, a, b) -> list:
        return POLYMUL_METHODS[self.polymul](a, b)

    def encrypt(self, pt: Plaintext | int) -> Ciphertext:
        if not isinstance(pt, Plaintext):
            pt = self.encode(pt)
        p = self.params
        pk0, pk1 = self.keys.public
        u = _sample_ternary(self.rng, p.ring_dim).tolist()
        e1 = _sample_cbd(self.rng, p).tolist()
        e2 = _sample_cbd(self.rng, p).tolist()
        pu0 = self._mul_exact(pk0.tolist(), u)
        pu1 = self._mul_exact(pk1.tolist(), u)
        dm = [p.delta * m for m in pt.coeffs]
        c0 = _to_u64([x + y + z for x, y, z in zip(pu0, e1, dm)], p)
        c1 = _to_u64([x + y for x, y in zip(pu1, e2)], p)
        return Ciphertext((c0, c1), 0, p, self._fresh_bound)

    def zero(self, level: int = 0) -> Ciphertext:
        """Noiseless encryption of zero at ``level`` (the neutral element of addition)."""
        z = np.zeros(self.params.ring_dim, dtype=np.uint64)
        return Ciphertext((z, z.copy()), level, self.params, 0.0)

    def _phase(self, ct: Ciphertext) -> list:
        """``c0 + c1 s (+ c2 s^2)`` mod ``q_c``, centered."""
        if not self.can_decrypt:
            raise MissingSecretKey("this role holds evaluation keys only")
        s = self.keys.secret.tolist()
        acc = [int(v) for v in ct.polys[0].tolist()]
        spow = s
        for poly in ct.polys[1:]:
            prod = negacyclic_kronecker(poly.tolist(), spow)
            acc = [x + y for x, y in zip(acc, prod)]
            spow = negacyclic_kronecker(spow, s)
        return _centered(acc, self.params.q_c)

    def decrypt(self, ct: Ciphertext, strict: bool = False) -> Plaintext:
        """Decrypt; with ``strict`` the canary coefficients and the noise are checked.

        Payloads live in coefficient 0, so for scalar circuits the remaining
        coefficients must decrypt to zero.  A nonzero canary or a measured
        noise above a quarter of the budget raises :class:`NoiseOverflow`.
        """
        p = self.params
        phase = self._phase(ct)
        t, q = p.t, p.q_c
        half_q = q // 2
        msg = [((t * v + half_q) // q) % t for v in phase]
        msg = _centered(msg, t)
        if strict:
            noise = max(abs(v) for v in _centered([v - p.delta * m for v, m in zip(phase, msg)], q))
            if noise >= p.noise_budget / 4 or any(msg[1:]):
                raise NoiseOverflow(f"decryption noise {noise} close to the budget {p.noise_budget:.3g}")
        return Plaintext(tuple(msg), t)

    def decrypt_value(self, ct: Ciphertext, strict: bool = False) -> int:
        return self.decrypt(ct, strict).value

    def noise(self, ct: Ciphertext) -> int:
        """Measured infinity norm of the decryption noise (needs the secret key)."""
        p = self.params
        phase = self._phase(ct)
        msg = self.decrypt(ct).coeffs
        return max(abs(_centered([v - p.delta * m], p.q_c)[0]) for v, m in zip(phase, msg))

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        _check_pair(a, b)
        size = max(a.size, b.size)
        pa = a.polys + (np.zeros_like(a.polys[0]),) * (size - a.size)
        pb = b.polys + (np.zeros_like(b.polys[0]),) * (size - b.size)
        polys = tuple(_reduce(x + y, self.params) for x, y in zip(pa, pb))
        return Ciphertext(polys, a.level, a.params, a.noise_bound + b.noise_bound)

    def add_plain(self, a: Ciphertext, pt: Plaintext) -> Ciphertext:
        dm = _to_u64([self.params.delta * m for m in pt.coeffs], self.params)
        polys = (_reduce(a.polys[0] + dm, self.params),) + a.polys[1:]
        return Ciphertext(polys, a.level, a.params, a.noise_bound)

    def mul_plain(self, a: Ciphertext, pt: Plaintext) -> Ciphertext:
        """Ciphertext times plaintext polynomial; consumes no level."""
        p = self.params
        if all(v == 0 for v in pt.coeffs[1:]):
            c = np.uint64(pt.value % p.q_c)
            polys = tuple(_reduce(x * c, p) for x in a.polys)
        else:
            coeffs = list(pt.coeffs)
            polys = tuple(_to_u64(self._mul_exact(x.tolist(), coeffs), p) for x in a.polys)
        return Ciphertext(polys, a.level, a.params, a.noise_bound * max(pt.l1(), 1))

    def _tensor_bound(self, a: Ciphertext, b: Ciphertext) -> float:
        p = self.params
        n = p.ring_dim
        # heuristic: phase overflow r has coefficients of size ~ sqrt(n/3), message up to t/2
        r = 6.0 * math.sqrt(n / 3.0) + 1.0
        spread = 6.0 * math.sqrt(n)
        cross = p.t * spread * r * (a.noise_bound + b.noise_bound) / 6.0 + (p.t / 2) * (a.noise_bound + b.noise_bound)
        return cross + a.noise_bound * b.noise_bound * p.t / p.q_c * n + p.t * spread

    def mul_ct(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        """Relinearized product; the result level is one higher."""
        return self.dot([(a, b)])

    def dot(self, pairs) -> Ciphertext:
        """``sum_i a_i * b_i`` with one rounding and one relinearization.

        Equivalent to ``mul_ct`` followed by ``add``; fusing saves the
        repeated relinearizations.  The result level is one above the highest
        operand level and must not exceed ``L``.
        """
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty product sum")
        p = self.params
        level = max(max(a.level, b.level) for a, b in pairs)
        for a, b in pairs:
            _check_params(a, b)
            if a.size != 2 or b.size != 2:
                raise HeError("operands must be relinearized")
        if level + 1 > p.levels:
            raise LevelError(f"multiplicative depth {level + 1} exceeds the {p.levels} available level(s)")
        n, slot = p.ring_dim, self._slot
        if len(pairs).bit_length() > 14:
            raise ValueError("too many products in one fused sum")
        d0 = d1 = d2 = 0
        if self.polymul == "kronecker":
            for a, b in pairs:
                a0, a1 = _pack_u64(a.polys[0], slot), _pack_u64(a.polys[1], slot)
                b0, b1 = _pack_u64(b.polys[0], slot), _pack_u64(b.polys[1], slot)
                x0, x2 = a0 * b0, a1 * b1
                d0 += x0
                d2 += x2
                d1 += (a0 + a1) * (b0 + b1) - x0 - x2
            d0, d1, d2 = (_fold(_unpack(d, 2 * n - 1, slot), n) for d in (d0, d1, d2))
        else:
            d0, d1, d2 = [0] * n, [0] * n, [0] * n
            for a, b in pairs:
                a0, a1 = a.polys[0].tolist(), a.polys[1].tolist()
                b0, b1 = b.polys[0].tolist(), b.polys[1].tolist()
                for acc, (x, y) in ((d0, (a0, b0)), (d1, (a0, b1)), (d1, (a1, b0)), (d2, (a1, b1))):
                    prod = self._mul_exact(x, y)
                    for i in range(n):
                        acc[i] += prod[i]
        shift, half = p.log_q, 1 << (p.log_q - 1)
        c0, c1, c2 = ([(p.t * v + half) >> shift for v in d] for d in (d0, d1, d2))
        bound = sum(self._tensor_bound(a, b) for a, b in pairs)
        c0, c1 = self._relinearize(c0, c1, c2)
        self.max_level = max(self.max_level, level + 1)
        return Ciphertext((c0, c1), level + 1, p, bound + self._relin_bound + 1.0)

    def _relinearize(self, c0: list, c1: list, c2: list):
        p = self.params
        n, slot = p.ring_dim, self._slot
        c2u = _to_u64(c2, p)
        wbits = p.base.bit_length() - 1
        acc0 = acc1 = 0
        for i, (r0, r1) in enumerate(self._relin_packed):
            digit = (c2u >> np.uint64(wbits * i)) & np.uint64(p.base - 1)
            packed = _pack_u64(digit, slot)
            acc0 += packed * r0
            acc1 += packed * r1
        e0 = _fold(_unpack(acc0, 2 * n - 1, slot), n)
        e1 = _fold(_unpack(acc1, 2 * n - 1, slot), n)
        return (_to_u64([x + y for x, y in zip(c0, e0)], p),
                _to_u64([x + y for x, y in zip(c1, e1)], p))


# -- mock backend ---------------------------------------------------------------------

@dataclass
class MockCiphertext:
    """Exact payload (sparse coefficient map) with its level and multiplicative depth.

    ``level`` counts ciphertext-ciphertext products as the real scheme does;
    ``depth`` also counts plaintext multiplications and is the circuit depth.
    """

    coeffs: dict
    level: int
    params: HeParams
    depth: int = 0

    @property
    def value(self) -> int:
        return self.coeffs.get(0, 0)

    def to_bytes(self) -> bytes:
        """Same framing as the BFV form with one polynomial of signed 64-bit words."""
        words = np.zeros(self.params.ring_dim, dtype="<i8")
        for k, v in self.coeffs.items():
            words[k] = v
        body = struct.pack("<BB", 1, self.level) + words.tobytes()
        return struct.pack("<I", len(body)) + body

    @classmethod
    def read_from(cls, data: bytes, params: HeParams, offset: int = 0):
        if len(data) - offset < 6:
            raise WireFormatError("truncated ciphertext header")
        (length,) = struct.unpack_from("<I", data, offset)
        count, level = struct.unpack_from("<BB", data, offset + 4)
        n = params.ring_dim
        if count != 1 or length != 2 + 8 * n:
            raise WireFormatError("mock ciphertext length does not match its header")
        end = offset + 4 + length
        if end > len(data):
            raise WireFormatError("truncated ciphertext body")
        words = np.frombuffer(data, dtype="<i8", count=n, offset=offset + 6)
        return cls({int(i): int(words[i]) for i in np.flatnonzero(words)}, level, params), end


class MockBackend:
    """Exact integer evaluation mirroring :class:`BfvBackend`.

    Every result is checked against the centered range of ``Z_t``; leaving it
    raises :class:`MagnitudeOverflow` where the real scheme would silently
    wrap.  ``max_depth`` records the deepest multiplication chain evaluated,
    which is the depth audit of the circuit.
    """

    name = "mock"
    can_decrypt = True

    def __init__(self, params: HeParams | None = None, seed: int = 0):
        self.params = params or HeParams()
        self.max_level = 0
        self.max_depth = 0
        lo, hi = -(self.params.t // 2), (self.params.t + 1) // 2 - 1
        self._range = (lo, hi)

    def _check(self, coeffs: dict) -> dict:
        lo, hi = self._range
        for v in coeffs.values():
            if v < lo or v > hi:
                raise MagnitudeOverflow(f"payload {v} outside [{lo}, {hi}]")
        return {k: v for k, v in coeffs.items() if v}

    def _result(self, coeffs: dict, level: int, depth: int) -> MockCiphertext:
        self.max_level = max(self.max_level, level)
        self.max_depth = max(self.max_depth, depth)
        return MockCiphertext(self._check(coeffs), level, self.params, depth)

    def encode(self, value: int) -> Plaintext:
        return Plaintext.scalar(value, self.params.t, self.params.ring_dim)

    def encode_vector(self, values) -> Plaintext:
        return Plaintext.from_coeffs(values, self.params.t, self.params.ring_dim)

    def read_ciphertext(self, data: bytes, offset: int = 0):
        return MockCiphertext.read_from(data, self.params, offset)

    def encrypt(self, pt: Plaintext | int) -> MockCiphertext:
        if not isinstance(pt, Plaintext):
            pt = self.encode(pt)
        return MockCiphertext(self._check(dict(enumerate(pt.coeffs))), 0, self.params)

    def zero(self, level: int = 0) -> MockCiphertext:
        return MockCiphertext({}, level, self.params)

    def decrypt(self, ct: MockCiphertext, strict: bool = False) -> Plaintext:
        n = self.params.ring_dim
        return Plaintext(tuple(ct.coeffs.get(i, 0) for i in range(n)), self.params.t)

    def decrypt_value(self, ct: MockCiphertext, strict: bool = False) -> int:
        return ct.value

    def add(self, a: MockCiphertext, b: MockCiphertext) -> MockCiphertext:
        _check_pair(a, b)
        out = dict(a.coeffs)
        for k, v in b.coeffs.items():
            out[k] = out.get(k, 0) + v
        return self._result(out, a.level, max(a.depth, b.depth))

    def add_plain(self, a: MockCiphertext, pt: Plaintext) -> MockCiphertext:
        out = dict(a.coeffs)
        for k, v in enumerate(pt.coeffs):
            if v:
                out[k] = out.get(k, 0) + v
        return self._result(out, a.level, a.depth)

    def _negacyclic(self, x: dict, y: dict) -> dict:
        n = self.params.ring_dim
        out: dict = {}
        for i, u in x.items():
            for j, v in y.items():
                k = i + j
                if k >= n:
                    out[k - n] = out.get(k - n, 0) - u * v
                else:
                    out[k] = out.get(k, 0) + u * v
        return out

    def mul_plain(self, a: MockCiphertext, pt: Plaintext) -> MockCiphertext:
        coeffs = {i: v for i, v in enumerate(pt.coeffs) if v}
        return self._result(self._negacyclic(a.coeffs, coeffs), a.level, a.depth + 1)

    def mul_ct(self, a: MockCiphertext, b: MockCiphertext) -> MockCiphertext:
        return self.dot([(a, b)])

    def dot(self, pairs) -> MockCiphertext:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty product sum")
        level = max(max(a.level, b.level) for a, b in pairs)
        for a, b in pairs:
            _check_params(a, b)
        if level + 1 > self.params.levels:
            raise LevelError(f"multiplicative depth {level + 1} exceeds the {self.params.levels} available level(s)")
        out: dict = {}
        depth = 0
        for a, b in pairs:
            prod = self._check(self._negacyclic(a.coeffs, b.coeffs))
            depth = max(depth, a.depth + 1, b.depth + 1)
            for k, v in prod.items():
                out[k] = out.get(k, 0) + v
        return self._result(out, level + 1, depth)

    def noise(self, ct) -> int:
        return 0


# -- circuits and certification ---------------------------------------------------------

FIG1_CIRCUITS = {
    "(z1+z2)(z3+z4)": lambda be, z: be.mul_ct(be.add(z[0], z[1]), be.add(z[2], z[3])),
    "(z1 z2)+(z3 z4)": lambda be, z: be.add(be.mul_ct(z[0], z[1]), be.mul_ct(z[2], z[3])),
    "(z1 z2)(z3+z4)": lambda be, z: be.mul_ct(be.mul_ct(z[0], z[1]), be.add(z[2], z[3])),
}


def circuit_depth(circuit, values=(1, 2, 3, 4), levels: int = 8) -> int:
    """Multiplicative depth of ``circuit(backend, inputs)`` measured on a mock backend."""
    be = MockBackend(HeParams(ring_dim=16, q_c=2**64, t=2**20, levels=levels))
    circuit(be, [be.encrypt(v) for v in values])
    return be.max_depth


@dataclass
class CertificationReport:
    params: HeParams
    terms: int
    trials: int
    max_noise: int
    budget: float
    margin_bits: float
    certified: bool
    polymul: str = "kronecker"


def certify_params(params: HeParams, terms: int = 64, trials: int = 8, seed: int = 0,
                   min_margin_bits: float = 4.0) -> CertificationReport:
    """Empirically certify depth-1 decryption for sums of ``terms`` products.

    Each trial encrypts ``2 terms`` random messages of full magnitude, forms
    the fused product sum, and measures its noise with the secret key.  The
    parameters are certified when the worst measured noise stays at least
    ``min_margin_bits`` bits below ``q_c / (2 t)``.
    """
    keys = keygen(params, seed)
    be = BfvBackend(keys, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    half = params.t // 2 - 1
    worst = 0
    for _ in range(trials):
        cts = [be.encrypt(int(v)) for v in rng.integers(-half, half + 1, size=2 * terms)]
        res = be.dot(zip(cts[0::2], cts[1::2]))
        worst = max(worst, be.noise(res))
    margin = math.log2(params.noise_budget / max(worst, 1))
    return CertificationReport(params, terms, trials, worst, params.noise_budget, margin,
                               margin >= min_margin_bits)


def search_ciphertext_modulus(ring_dim: int = 256, t: int = 2**20, terms: int = 64,
                              trials: int = 4, seed: int = 0, min_margin_bits: float = 4.0,
                              **kw) -> CertificationReport:
    """Smallest power-of-two ``q_c <= 2**64`` certified by :func:`certify_params`."""
    start = max(t.bit_length(), 8)
    report = None
    for log_q in range(start, 65):
        params = HeParams(ring_dim=ring_dim, q_c=2**log_q, t=t, **kw)
        report = certify_params(params, terms, trials, seed, min_margin_bits)
        if report.certified:
            return report
    return report


# search_ciphertext_modulus(256, 2**20, terms=64) certifies 2**63 at a 4-bit margin;
# the default keeps one more bit
DEFAULT_PARAMS = HeParams(ring_dim=256, q_c=2**64, t=2**20, sigma=3.2, base=2**8, levels=1)
