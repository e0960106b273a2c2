"""Counter-based random streams and the noise increments built on them.

Every random number is a pure function of ``(seed, stream_id, counter)``
through the Philox4x32-10 block cipher, so a particle's increments do not
depend on how many other particles exist or on the order in which streams
are evaluated.  One Philox block yields four 32-bit words, i.e. two
uniforms in (0, 1), i.e. two standard normals via Box-Muller.

Stable noise uses the Laplace-exponent convention
``E exp(-lam * S_t) = exp(-t * lam**(alpha/2))``.  Under it the subordinated
Brownian motion has ``E exp(i xi W_{S_t}) = exp(-t (|xi|^2 / 2)^(alpha/2))``,
which differs from the symbol of ``-(-Delta)^(alpha/2)`` by ``2**(-alpha/2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STABLE_CONVENTION = "laplace_exponent_plain: E exp(-lam S_t) = exp(-t lam^(alpha/2))"

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_MASK64 = (1 << 64) - 1
_SHIFT32 = np.uint64(32)

# stream id layout: low 40 bits index the particle, high bits the role
ROLE_SHIFT = 40
ROLE_B1 = 0
ROLE_B2 = 1
ROLE_SUB = 2
ROLE_W = 3
ROLE_INIT = 4


class NoiseParameterError(ValueError):
    pass


def philox4x32(counters, key) -> np.ndarray:
    """Philox4x32-10 on a batch of 128-bit counters.

    counters: integer array of shape (n, 4) holding 32-bit words.
    key: pair of 32-bit words.  Returns uint64 array (n, 4) of 32-bit words.
    """
    c = np.asarray(counters, dtype=np.uint64)
    c0, c1, c2, c3 = (c[:, i].copy() for i in range(4))
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for rnd in range(10):
        if rnd:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = c0 * _M0
        p1 = c2 * _M1
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
    return np.stack([c0, c1, c2, c3], axis=1)


def _split64(v: int) -> tuple[int, int]:
    v &= _MASK64
    return v & 0xFFFFFFFF, v >> 32


def _blocks(seed: int, stream_ids: np.ndarray, counter: int, n_blocks: int) -> np.ndarray:
    """Raw words, shape (n_streams, n_blocks, 4)."""
    sid = np.asarray(stream_ids, dtype=np.uint64).reshape(-1)
    ns = sid.size
    ctr = np.empty((ns, n_blocks, 4), dtype=np.uint64)
    pos = np.uint64(counter) + np.arange(n_blocks, dtype=np.uint64)
    ctr[:, :, 0] = (pos & _MASK32)[None, :]
    ctr[:, :, 1] = (pos >> _SHIFT32)[None, :]
    ctr[:, :, 2] = (sid & _MASK32)[:, None]
    ctr[:, :, 3] = (sid >> _SHIFT32)[:, None]
    out = philox4x32(ctr.reshape(-1, 4), _split64(seed))
    return out.reshape(ns, n_blocks, 4)


def _words_to_unit(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    # 53 random bits, shifted half an ulp so the result is in the open interval
    x = ((hi << _SHIFT32) | lo) >> np.uint64(11)
    return (x.astype(np.float64) + 0.5) * 2.0**-53


def _block_uniforms(words: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u1 = _words_to_unit(words[..., 0], words[..., 1])
    u2 = _words_to_unit(words[..., 2], words[..., 3])
    return u1, u2


def _box_muller(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def stream_id(particle: int, role: int = 0) -> int:
    return (int(role) << ROLE_SHIFT) | int(particle)


def stream_ids(n: int, role: int = 0, offset: int = 0) -> np.ndarray:
    base = np.uint64(int(role) << ROLE_SHIFT)
    return base | (np.arange(n, dtype=np.uint64) + np.uint64(offset))


class StreamBank:
    """Many streams advanced in lockstep (one per particle).

    Row ``i`` of every draw equals what ``RngStream(seed, stream_ids[i],
    counter)`` would produce, so results do not depend on how the rows are
    chunked across workers.  Every draw starts on a fresh Philox block.
    """

    def __init__(self, seed: int, ids, counter: int = 0):
        self.seed = int(seed)
        self.ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        self.counter = int(counter)

    def __len__(self):
        return self.ids.size

    def subset(self, sl) -> "StreamBank":
        return StreamBank(self.seed, self.ids[sl], self.counter)

    def uniforms(self, k: int) -> np.ndarray:
        nb = (k + 1) // 2
        u1, u2 = _block_uniforms(_blocks(self.seed, self.ids, self.counter, nb))
        self.counter += nb
        return np.stack([u1, u2], axis=-1).reshape(self.ids.size, 2 * nb)[:, :k]

    def normals(self, k: int) -> np.ndarray:
        nb = (k + 1) // 2
        u1, u2 = _block_uniforms(_blocks(self.seed, self.ids, self.counter, nb))
        self.counter += nb
        return _box_muller(u1, u2).reshape(self.ids.size, 2 * nb)[:, :k]

    def positive_stable(self, params: "StableParams", h: float) -> np.ndarray:
        _check_positive(h, "h")
        u1, u2 = _block_uniforms(_blocks(self.seed, self.ids, self.counter, 1))
        self.counter += 1
        return kanter_stable(u1[:, 0], u2[:, 0], params.beta) * h ** (1.0 / params.beta)


class RngStream:
    """A single counter-based stream.  Mutable: drawing advances ``counter``."""

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)

    def _bank(self) -> StreamBank:
        return StreamBank(self.seed, [self.stream_id], self.counter)

    def uniforms(self, n: int) -> np.ndarray:
        bank = self._bank()
        out = bank.uniforms(n)[0]
        self.counter = bank.counter
        return out

    def normals(self, n: int) -> np.ndarray:
        bank = self._bank()
        out = bank.normals(n)[0]
        self.counter = bank.counter
        return out


@dataclass(frozen=True)
class StableParams:
    """Rotationally invariant alpha-stable noise built as W_{S_t}."""

    stable_alpha: float
    normalization: str = "laplace_exponent_plain"

    def __post_init__(self):
        if not 1.0 < self.stable_alpha < 2.0:
            raise NoiseParameterError(f"stable_alpha must lie in (1, 2), got {self.stable_alpha}")
        if self.normalization != "laplace_exponent_plain":
            raise NoiseParameterError(f"unknown normalization {self.normalization!r}")

    @property
    def beta(self) -> float:
        """Index of the subordinator, alpha / 2."""
        return self.stable_alpha / 2.0


def _check_positive(v, name):
    if not v > 0:
        raise NoiseParameterError(f"{name} must be positive, got {v}")


def kanter_stable(u1, u2, beta: float):
    """Kanter's representation of a one-sided beta-stable variate.

    u1, u2 are independent uniforms on (0, 1).  The result has Laplace
    transform ``exp(-lam**beta)``.
    """
    u = np.pi * np.asarray(u1)
    e = -np.log(np.asarray(u2))
    a = (np.sin(beta * u) ** (beta / (1.0 - beta)) * np.sin((1.0 - beta) * u)
         / np.sin(u) ** (1.0 / (1.0 - beta)))
    return (a / e) ** ((1.0 - beta) / beta)


def gaussian_increments(stream: RngStream, n: int, d: int, h: float) -> np.ndarray:
    """n x d array of i.i.d. N(0, h) entries."""
    _check_positive(h, "h")
    return stream.normals(n * d).reshape(n, d) * np.sqrt(h)


def positive_stable_increment(stream: RngStream, params: StableParams, h: float) -> float:
    """One increment S_{t+h} - S_t of the alpha/2-stable subordinator."""
    _check_positive(h, "h")
    u = stream.uniforms(2)
    return float(kanter_stable(u[0], u[1], params.beta) * h ** (1.0 / params.beta))


def positive_stable_sample(stream: RngStream, params: StableParams, h: float, n: int) -> np.ndarray:
    """n independent subordinator increments over a step h (one block each)."""
    _check_positive(h, "h")
    u = stream.uniforms(2 * n).reshape(n, 2)
    return kanter_stable(u[:, 0], u[:, 1], params.beta) * h ** (1.0 / params.beta)


def subordinated_gaussian(stream: RngStream, delta_S: float, d: int) -> np.ndarray:
    """W_{S+delta_S} - W_S given the subordinator increment: N(0, delta_S I_d)."""
    _check_positive(delta_S, "delta_S")
    return np.sqrt(delta_S) * stream.normals(d)


def reflect(increment, u, atol: float = 1e-12) -> np.ndarray:
    """Apply the mirror ``I - 2 u u^T`` to an increment (or a batch of them).

    ``u`` may be a single unit vector or an array of unit vectors matching
    the batch shape of ``increment``.
    """
    v = np.asarray(increment, dtype=float)
    u = np.asarray(u, dtype=float)
    norms = np.linalg.norm(u, axis=-1)
    if np.any(np.abs(norms - 1.0) > atol):
        raise NoiseParameterError("reflection direction must be a unit vector")
    return v - 2.0 * np.sum(v * u, axis=-1, keepdims=True) * u
