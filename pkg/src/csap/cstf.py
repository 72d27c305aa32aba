"""CSTF v1 tensor files and checkpoint directories.

Layout (little-endian): magic ``CSTF``, u32 version (1), u32 dtype
(0 = f32, 1 = f64), u32 rank, ``rank`` u32 extents, row-major payload.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CSTF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
MANIFEST = "manifest.txt"


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise FormatError(f"CSTF stores f32/f64 only, got {array.dtype}")
    header = MAGIC + struct.pack("<III", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("bad magic: not a CSTF file")
    version, code, rank = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported CSTF version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    offset = 16 + 4 * rank
    if len(blob) < offset:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", blob, 16)
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise FormatError(f"payload is {len(blob) - offset} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a sibling temp file so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save(path, array: np.ndarray) -> None:
    atomic_write(path, encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def _dtype_name(dtype: np.dtype) -> str:
    return "f32" if dtype == np.float32 else "f64"


def save_checkpoint(directory, state: dict[str, np.ndarray]) -> None:
    """One CSTF file per parameter plus a ``name shape=.. dtype=.. file=..`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, value) in enumerate(state.items()):
        fname = f"p{i:04d}.cstf"
        save(directory / fname, value)
        shape = ",".join(str(n) for n in value.shape)
        lines.append(f"{name} shape={shape} dtype={_dtype_name(value.dtype)} file={fname}")
    atomic_write(directory / MANIFEST, ("\n".join(lines) + "\n").encode())


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FormatError(f"no {MANIFEST} in {directory}")
    state = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        name, *fields = line.split()
        try:
            meta = dict(f.split("=", 1) for f in fields)
            shape = tuple(int(n) for n in meta["shape"].split(",") if n)
            dtype, fname = meta["dtype"], meta["file"]
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed manifest line {lineno}: {line!r}") from exc
        value = load(directory / fname)
        if value.shape != shape or _dtype_name(value.dtype) != dtype:
            raise FormatError(f"{name}: manifest says {shape}/{dtype}, file has {value.shape}/{value.dtype}")
        state[name] = value
    return state
