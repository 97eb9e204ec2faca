"""Little-endian binary container shared by projected-sample caches, optimizer
checkpoints and corpus exports.

Every file starts with ``GSEL``, a u32 format version and a u32 record kind.
Projected-sample batches then carry ``L, k1, k2, T, N`` as u32.  When layers
have different sketch sizes ``k1 = k2 = 0`` and a table of ``L`` (k1, k2)
u32 pairs follows.  Matrices are row-major f64.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ConfigError

MAGIC = b"GSEL"
VERSION = 1

KIND_PROJECTED = 1
KIND_OPTIMIZER = 2
KIND_CORPUS = 3


def _u32(f: BinaryIO, *vals: int) -> None:
    f.write(struct.pack(f"<{len(vals)}I", *vals))


def _read(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ConfigError("truncated GSEL container")
    return buf


def _r_u32(f: BinaryIO, count: int = 1):
    vals = struct.unpack(f"<{count}I", _read(f, 4 * count))
    return vals if count > 1 else vals[0]


def _w_mat(f: BinaryIO, m: np.ndarray) -> None:
    f.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def _r_mat(f: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    return np.frombuffer(_read(f, 8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def write_header(f: BinaryIO, kind: int) -> None:
    f.write(MAGIC)
    _u32(f, VERSION, kind)


def read_header(f: BinaryIO, expect_kind: int) -> int:
    if _read(f, 4) != MAGIC:
        raise ConfigError("not a GSEL container (bad magic)")
    version, kind = _r_u32(f, 2)
    if version != VERSION:
        raise ConfigError(f"unsupported GSEL version {version}")
    if kind != expect_kind:
        raise ConfigError(f"GSEL record kind {kind}, expected {expect_kind}")
    return version


def write_shape_table(f: BinaryIO, shapes: Sequence[tuple[int, int]]) -> None:
    uniform = len(set(shapes)) == 1
    k1, k2 = shapes[0] if uniform else (0, 0)
    _u32(f, len(shapes), k1, k2)
    if not uniform:
        for a, b in shapes:
            _u32(f, a, b)


def read_shape_table(f: BinaryIO) -> list[tuple[int, int]]:
    L, k1, k2 = _r_u32(f, 3)
    if k1 == 0 and k2 == 0:
        return [tuple(_r_u32(f, 2)) for _ in range(L)]
    return [(k1, k2)] * L


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def dump_projected(samples, path: str | os.PathLike | None = None) -> bytes:
    """Serialize a batch of ProjectedSample; returns the bytes, writing them if a path is given."""
    if not samples:
        raise ConfigError("cannot dump an empty batch")
    shapes = list(samples[0].shapes)
    T = samples[0].T
    for s in samples:
        if list(s.shapes) != shapes or s.T != T:
            raise ConfigError(f"sample {s.sample_id}: non-uniform shapes in batch")
    f = io.BytesIO()
    write_header(f, KIND_PROJECTED)
    uniform = len(set(shapes)) == 1
    k1, k2 = shapes[0] if uniform else (0, 0)
    _u32(f, len(shapes), k1, k2, T, len(samples))
    if not uniform:
        for a, b in shapes:
            _u32(f, a, b)
    for s in samples:
        f.write(struct.pack("<q", s.sample_id))
        for a, g in s.layers:
            _w_mat(f, a)
            _w_mat(f, g)
    data = f.getvalue()
    if path is not None:
        atomic_write_bytes(path, data)
    return data


def load_projected(src: str | os.PathLike | bytes):
    from .gradcore import ProjectedSample

    f = io.BytesIO(src) if isinstance(src, (bytes, bytearray)) else open(src, "rb")
    with f:
        read_header(f, KIND_PROJECTED)
        L, k1, k2, T, n = _r_u32(f, 5)
        if k1 == 0 and k2 == 0:
            shapes = [tuple(_r_u32(f, 2)) for _ in range(L)]
        else:
            shapes = [(k1, k2)] * L
        out = []
        for _ in range(n):
            (sid,) = struct.unpack("<q", _read(f, 8))
            layers = []
            for a_dim, g_dim in shapes:
                a = _r_mat(f, (a_dim, T))
                g = _r_mat(f, (g_dim, T))
                layers.append((a, g))
            out.append(ProjectedSample(sid, tuple(layers)))
    return out


# helpers reused by optstate and simkit
w_u32 = _u32
r_u32 = _r_u32
w_mat = _w_mat
r_mat = _r_mat
read_exact = _read
read_exact = _read
