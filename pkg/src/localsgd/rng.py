"""Counter-based random streams.

Every draw is a pure function of ``(seed, purpose, client, iteration, block)``,
so results never depend on the order in which clients are processed or on how
many threads process them.  The generator is Philox4x32-10, evaluated in
vectorized form over many counters at once (numpy only exposes a scalar,
stateful Philox bit generator).
"""

from __future__ import annotations

import threading

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)

# purposes, stored in counter word 1
ESTIMATOR = 0
SHARED = 1
REFRESH = 2
ANCHOR_BATCH = 3


def philox4x32(counter: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Philox4x32-10 block function.

    ``counter`` has shape (..., 4) with entries in [0, 2**32); the result has
    the same shape and holds the four 32-bit output words (as uint64).
    """
    c = np.asarray(counter, dtype=np.uint64)
    c0, c1, c2, c3 = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    k0 = np.uint64(key[0]) & _MASK
    k1 = np.uint64(key[1]) & _MASK
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            ((p1 >> _SHIFT) ^ c1 ^ k0) & _MASK,
            p1 & _MASK,
            ((p0 >> _SHIFT) ^ c3 ^ k1) & _MASK,
            p0 & _MASK,
        )
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return np.stack([c0, c1, c2, c3], axis=-1)


def seed_key(seed: int) -> tuple[int, int]:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def _counters(purpose, clients, k, blocks):
    clients = np.asarray(clients, dtype=np.uint64)
    ctr = np.empty(clients.shape + (blocks, 4), dtype=np.uint64)
    ctr[..., 0] = np.arange(blocks, dtype=np.uint64)
    ctr[..., 1] = np.uint64(purpose)
    ctr[..., 2] = clients[..., None]
    ctr[..., 3] = (np.asarray(k, dtype=np.uint64) & _MASK)[..., None] if np.ndim(k) else np.uint64(k)
    return ctr


def uniforms(seed: int, purpose: int, clients, k: int, count: int) -> np.ndarray:
    """``count`` doubles in [0, 1) per client, shape (len(clients), count).

    Each 53-bit double is assembled from two 32-bit words, so one Philox block
    yields two doubles.
    """
    if np.any(np.asarray(k) >= 2**32):
        raise ValueError("iteration counter exceeds 32 bits")
    blocks = (count + 1) // 2
    words = philox4x32(_counters(purpose, clients, k, blocks), seed_key(seed))
    hi = words[..., 0::2] >> np.uint64(5)  # 27 bits
    lo = words[..., 1::2] >> np.uint64(6)  # 26 bits
    u = (hi.astype(np.float64) * 67108864.0 + lo.astype(np.float64)) / 9007199254740992.0
    return u.reshape(u.shape[:-2] + (2 * blocks,))[..., :count]


def normals(seed: int, purpose: int, clients, k: int, count: int) -> np.ndarray:
    """Standard normal draws via Box-Muller, shape (len(clients), count)."""
    half = (count + 1) // 2
    u = uniforms(seed, purpose, clients, k, 2 * half)
    u1 = 1.0 - u[..., 0::2]  # (0, 1], keeps log finite
    u2 = u[..., 1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    z = np.concatenate([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)
    return z[..., :count]


def indices(u: np.ndarray, high: int) -> np.ndarray:
    """Map uniforms in [0,1) to integers in [0, high)."""
    j = np.floor(u * high).astype(np.int64)
    return np.minimum(j, high - 1)


def shared_uniform(seed: int, k: int, slot: int = 0) -> float:
    """One global coin per (iteration, slot), identical for all workers."""
    return float(uniforms(seed, SHARED, [slot], k, 1)[0, 0])


INIT_K_LIMIT = 2**32 - 2**16


def as_streams(seed_or_streams, n: int) -> "Streams":
    if isinstance(seed_or_streams, Streams):
        return seed_or_streams
    return Streams(int(seed_or_streams), n)


class Streams:
    """Windowed prefetch of counter-based draws for one run.

    Draws for ``window`` consecutive iterations and all clients are produced by
    a single vectorized Philox call.  Values are identical to calling
    :func:`uniforms` / :func:`normals` directly, only cheaper.
    """

    def __init__(self, seed: int, n: int, window: int = 256):
        self.seed = int(seed)
        self.n = n
        self.window = window
        self._cache: dict = {}
        self._all = np.arange(n)
        self._lock = threading.Lock()

    def _block(self, kind, purpose, count, k):
        with self._lock:
            return self._block_locked(kind, purpose, count, k)

    def _block_locked(self, kind, purpose, count, k):
        w0 = (k // self.window) * self.window
        key = (kind, purpose, count, w0)
        hit = self._cache.get(key)
        if hit is None:
            ks = np.arange(w0, w0 + self.window, dtype=np.uint64)
            clients = np.broadcast_to(self._all[None, :], (self.window, self.n))
            fn = uniforms if kind == "u" else normals
            hit = fn(self.seed, purpose, clients, ks[:, None], count)
            # keep only the current window per stream
            for old in [c for c in self._cache if c[:3] == key[:3]]:
                del self._cache[old]
            self._cache[key] = hit
        return hit[k - w0]

    def uniforms(self, purpose, clients, k, count):
        if k >= INIT_K_LIMIT:
            return uniforms(self.seed, purpose, clients, k, count)
        return self._block("u", purpose, count, k)[np.asarray(clients)]

    def normals(self, purpose, clients, k, count):
        if k >= INIT_K_LIMIT:
            return normals(self.seed, purpose, clients, k, count)
        return self._block("n", purpose, count, k)[np.asarray(clients)]

    def shared(self, k, slot=0):
        if k >= INIT_K_LIMIT:
            return shared_uniform(self.seed, k, slot)
        with self._lock:
            return self._shared_locked(k, slot)

    def _shared_locked(self, k, slot):
        w0 = (k // self.window) * self.window
        key = ("s", slot, w0)
        hit = self._cache.get(key)
        if hit is None:
            ks = np.arange(w0, w0 + self.window, dtype=np.uint64)
            hit = uniforms(self.seed, SHARED, np.full(self.window, slot), ks, 1)[:, 0]
            for old in [c for c in self._cache if c[:2] == key[:2]]:
                del self._cache[old]
            self._cache[key] = hit
        return float(hit[k - w0])
