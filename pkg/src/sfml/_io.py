"""Binary container shared by trajectory and pair files.

Layout (little-endian)::

    b"SFML" | version u16 | kind 4 bytes | N_T u64 | L u64 | d u64 | dt f64 | seed i64 | payload f64...

``kind`` is ``b"TRAJ"`` (payload ``N_T x (L+1) x d``) or ``b"PAIR"``
(payload ``M x 2 x d`` with ``M = N_T L``).
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SFML"
VERSION = 1
TRAJ = "TRAJ"
PAIR = "PAIR"
_HEADER = struct.Struct("<4sH4sQQQdq")


@dataclass
class Container:
    kind: str
    n_traj: int
    length: int
    dim: int
    dt: float
    seed: int
    payload: np.ndarray


def write_container(path, kind, n_traj, length, dim, dt, seed, payload):
    header = _HEADER.pack(MAGIC, VERSION, kind.encode(), n_traj, length, dim, float(dt), int(seed))
    data = np.ascontiguousarray(payload, dtype="<f8")
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())


def read_container(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, kind, n_traj, length, dim, dt, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    payload = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    kind = kind.decode()
    expected = n_traj * (length + 1) * dim if kind == TRAJ else n_traj * length * 2 * dim
    if payload.size != expected:
        raise ValueError(f"{path}: payload has {payload.size} values, header implies {expected}")
    return Container(kind, n_traj, length, dim, dt, seed, payload)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
