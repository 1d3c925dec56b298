"""Counter-based Gaussian stream addressed by (seed, path, step).

Philox4x32-10 maps a 128-bit counter and a 64-bit key to 128 random bits
with no state, so the increment of path ``p`` at step ``i`` is a pure
function of ``(seed, p, i)``.  Paths can then be split across workers in
any way without changing a single draw.

Counter layout: ``(step, block, path_lo, path_hi)``; key: ``(seed_lo, seed_hi)``.
Each block yields four uniforms and so four normals (two Box-Muller pairs).
"""
from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x32-10/box-muller"

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_LO = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


def philox4x32(counter, key, rounds: int = 10):
    """Vectorized Philox4x32.

    ``counter`` is a tuple of four uint32 arrays (broadcastable), ``key`` a
    pair of uint32 scalars.  Returns four uint32 arrays.
    """
    # words are carried in uint64 so the 32x32 -> 64 bit products need no casts
    c0, c1, c2, c3 = np.broadcast_arrays(
        *(np.asarray(c, dtype=np.uint32).astype(np.uint64) for c in counter))
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (p1 >> _S32) ^ c1 ^ np.uint64(k0), p1 & _LO, \
            (p0 >> _S32) ^ c3 ^ np.uint64(k1), p0 & _LO
        k0 = (k0 + 0x9E3779B9) & 0xFFFFFFFF
        k1 = (k1 + 0xBB67AE85) & 0xFFFFFFFF
    return tuple(c.astype(np.uint32) for c in (c0, c1, c2, c3))


def seed_key(seed: int):
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.uint32(seed & 0xFFFFFFFF), np.uint32(seed >> 32)


def _uniform(bits):
    # (x + 0.5) / 2^32 lies strictly inside (0, 1)
    return (bits.astype(np.float64) + 0.5) * (1.0 / 4294967296.0)


def normals(seed: int, steps, paths, k: int) -> np.ndarray:
    """Standard normals of shape ``(len(steps), len(paths), k)``.

    Entry ``[i, p, j]`` depends only on ``(seed, steps[i], paths[p], j)``.
    """
    steps = np.asarray(steps, dtype=np.uint64)
    paths = np.asarray(paths, dtype=np.uint64)
    key = seed_key(seed)
    n_blocks = -(-k // 4)
    out = np.zeros((len(steps), len(paths), 4 * n_blocks))
    s = steps.astype(np.uint32)[:, None]
    p_lo = (paths & _LO).astype(np.uint32)[None, :]
    p_hi = (paths >> _S32).astype(np.uint32)[None, :]
    for blk in range(n_blocks):
        r = philox4x32((s, np.uint32(blk), p_lo, p_hi), key)
        u = [_uniform(x) for x in r]
        for pair in range(min(2, -(-(k - 4 * blk) // 2))):
            u1, u2 = u[2 * pair], u[2 * pair + 1]
            rad = np.sqrt(-2.0 * np.log(u1))
            ang = 2.0 * np.pi * u2
            out[:, :, 4 * blk + 2 * pair] = rad * np.cos(ang)
            out[:, :, 4 * blk + 2 * pair + 1] = rad * np.sin(ang)
    return out[:, :, :k]
