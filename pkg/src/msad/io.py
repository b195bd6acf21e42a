"""Binary file formats, report records and run manifests.

All binary formats are little-endian.  Each begins with a 6-byte magic:

``MSADK1``  kernel table: f64 (s, d, eps), then four arrays (radii, v, g, g/r),
            each as a u64 length followed by that many f64 values.
``MSADP1``  particle snapshot: u32 (n, N, d), f64 t, u64 step_index, u64 seed,
            then n*N*d f64 positions in (species, particle, coordinate) order.
``MSADF1``  density field: u32 (n, d, m), f64 (L, t), then n*m^d f64 values,
            row-major per species.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC_KERNEL = b"MSADK1"
MAGIC_PARTICLES = b"MSADP1"
MAGIC_FIELD = b"MSADF1"


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, path):
        self.path = str(path)
        self.buf = Path(path).read_bytes()
        self.pos = 0

    def magic(self, expected):
        got = self.buf[:6]
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", self.path, 0)
        self.pos = 6

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("truncated header", self.path, self.pos)
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def f64(self, count):
        nbytes = 8 * count
        if self.pos + nbytes > len(self.buf):
            raise FormatError(f"truncated payload: need {count} values", self.path, self.pos)
        arr = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos += nbytes
        return arr

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError("trailing bytes after payload", self.path, self.pos)


def write_kernel_table(table, path):
    parts = [MAGIC_KERNEL, struct.pack("<ddd", table.s, float(table.d), table.eps)]
    for arr in (table.radii, table.v_eps, table.g_eps, table.q_eps):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))


def read_kernel_table(path):
    from .kernels import KernelTable

    rd = _Reader(path)
    rd.magic(MAGIC_KERNEL)
    s, d, eps = rd.unpack("<ddd")
    arrays = []
    for _ in range(4):
        (count,) = rd.unpack("<Q")
        arrays.append(rd.f64(count))
    rd.done()
    if len({a.size for a in arrays}) != 1:
        raise FormatError("kernel table arrays differ in length", str(path), rd.pos)
    return KernelTable(*arrays, eps=eps, s=s, d=int(d))


def write_snapshot(path, positions, t, step_index, seed):
    positions = np.ascontiguousarray(positions, dtype="<f8")
    n, N, d = positions.shape
    head = MAGIC_PARTICLES + struct.pack("<IIIdQQ", n, N, d, float(t), int(step_index), int(seed) & (2**64 - 1))
    _atomic_write(path, head + positions.tobytes())


def read_snapshot(path):
    """Return ``(positions, t, step_index, seed)``."""
    rd = _Reader(path)
    rd.magic(MAGIC_PARTICLES)
    n, N, d, t, step, seed = rd.unpack("<IIIdQQ")
    pos = rd.f64(n * N * d).reshape(n, N, d)
    rd.done()
    return pos, t, step, seed


def write_field(path, values, L, t):
    values = np.ascontiguousarray(values, dtype="<f8")
    n = values.shape[0]
    d = values.ndim - 1
    m = values.shape[1]
    head = MAGIC_FIELD + struct.pack("<IIIdd", n, d, m, float(L), float(t))
    _atomic_write(path, head + values.tobytes())


def read_field(path):
    """Return ``(values, L, t)`` with ``values`` of shape ``(n, m, ..., m)``."""
    rd = _Reader(path)
    rd.magic(MAGIC_FIELD)
    n, d, m, L, t = rd.unpack("<IIIdd")
    vals = rd.f64(n * m**d).reshape((n,) + (m,) * d)
    rd.done()
    return vals, L, t


def format_record(metric, params, value, stderr):
    """One tab-separated report line: metric, params, value, stderr."""
    if isinstance(params, dict):
        params = ",".join(f"{k}={v}" for k, v in params.items())
    return f"{metric}\t{params}\t{value:.17g}\t{stderr:.17g}"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, config_text, seed, files, wall_clock, extra=None):
    """Write ``manifest.json`` next to the run outputs."""
    from . import __version__

    out_dir = Path(out_dir)
    record = {
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "config": config_text,
        "seed": int(seed),
        "version": __version__,
        "wall_clock_seconds": round(float(wall_clock), 3),
        "files": {Path(f).name: sha256_file(f) for f in files},
    }
    if extra:
        record.update(extra)
    path = out_dir / "manifest.json"
    if path.exists():
        path.unlink()
    _atomic_write(path, (json.dumps(record, indent=2, sort_keys=True) + "\n").encode())
    return path
