"""Counter-based normal variates (Philox4x32-10).

Every draw is a pure function of ``(key, counter)``; the counter encodes
(particle, species, step, purpose, block).  Draws therefore do not depend on
the order in which particles are processed or on the number of threads.
"""

import numba as nb
import numpy as np

PHILOX_M0 = np.uint64(0xD2511F53)
PHILOX_M1 = np.uint64(0xCD9E8D57)
PHILOX_W0 = np.uint64(0x9E3779B9)
PHILOX_W1 = np.uint64(0xBB67AE85)
MASK32 = np.uint64(0xFFFFFFFF)

# purpose tags, stored in the top byte of counter word 3
BROWNIAN = 0
INITIAL = 1
AUXILIARY = 2

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


@nb.njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on a 4x32-bit counter with a 2x32-bit key.

    All arguments are ``uint64`` values holding 32-bit words.
    """
    for r in range(10):
        if r > 0:
            k0 = (k0 + PHILOX_W0) & MASK32
            k1 = (k1 + PHILOX_W1) & MASK32
        p0 = PHILOX_M0 * c0
        p1 = PHILOX_M1 * c2
        hi0 = p0 >> np.uint64(32)
        lo0 = p0 & MASK32
        hi1 = p1 >> np.uint64(32)
        lo1 = p1 & MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@nb.njit(cache=True, inline="always")
def _uniform53(hi, lo):
    # 53-bit uniform in [0, 1)
    return float((hi >> np.uint64(5)) * np.uint64(67108864) + (lo >> np.uint64(6))) * _INV_2_53


@nb.njit(cache=True)
def fill_normals(out, key, species, first_particle, step, purpose):
    """Standard normals for consecutive particles of one species.

    ``out`` has shape ``(count, d)``; row ``p`` receives the draw for particle
    ``first_particle + p``.  Each pair of uniforms is turned into two normals
    by Box-Muller.
    """
    count, d = out.shape
    k0 = np.uint64(key) & MASK32
    k1 = np.uint64(key) >> np.uint64(32)
    c1 = np.uint64(species)
    c2 = np.uint64(step) & MASK32
    tag = np.uint64(purpose) << np.uint64(24)
    nblocks = (d + 1) // 2
    for p in range(count):
        c0 = np.uint64(first_particle + p)
        col = 0
        for b in range(nblocks):
            w0, w1, w2, w3 = philox4x32(c0, c1, c2, tag | np.uint64(b), k0, k1)
            u1 = 1.0 - _uniform53(w0, w1)  # (0, 1]
            u2 = _uniform53(w2, w3)
            rad = np.sqrt(-2.0 * np.log(u1))
            out[p, col] = rad * np.cos(_TWO_PI * u2)
            col += 1
            if col < d:
                out[p, col] = rad * np.sin(_TWO_PI * u2)
                col += 1


@nb.njit(cache=True)
def normal_row(out, key, species, particle, step, purpose, block0):
    """Fill one d-vector of normals using blocks ``block0, block0 + 1, ...``."""
    d = out.shape[0]
    k0 = np.uint64(key) & MASK32
    k1 = np.uint64(key) >> np.uint64(32)
    c0 = np.uint64(particle)
    c1 = np.uint64(species)
    c2 = np.uint64(step) & MASK32
    tag = np.uint64(purpose) << np.uint64(24)
    col = 0
    b = block0
    while col < d:
        w0, w1, w2, w3 = philox4x32(c0, c1, c2, tag | np.uint64(b), k0, k1)
        u1 = 1.0 - _uniform53(w0, w1)
        u2 = _uniform53(w2, w3)
        rad = np.sqrt(-2.0 * np.log(u1))
        out[col] = rad * np.cos(_TWO_PI * u2)
        col += 1
        if col < d:
            out[col] = rad * np.sin(_TWO_PI * u2)
            col += 1
        b += 1


def normals(key, species, particles, step, d, purpose=BROWNIAN):
    """Normals for ``particles`` consecutive particles starting at index 0."""
    out = np.empty((particles, d))
    fill_normals(out, np.uint64(key), species, 0, step, purpose)
    return out


def derive_key(seed, *tags):
    """64-bit Philox key for a (seed, tag, ...) tuple, e.g. one replication."""
    words = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(t) for t in tags]]).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)
