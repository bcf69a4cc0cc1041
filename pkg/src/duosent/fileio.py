"""Binary file formats and atomic write helpers.

Checkpoint files ("DUOS") hold named float32 tensors behind a manifest of
(name, shape, offset) entries; the optimizer state sidecar reuses the same
layout. Embedding files ("DEMB") hold a dense matrix of sentence vectors
followed by their id strings. All integers are little-endian; all floats
are little-endian 32-bit. Writes go through a temp file plus rename so
readers never observe partial output.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from duosent.errors import InputError

CHECKPOINT_MAGIC = b"DUOS"
EMBEDDING_MAGIC = b"DEMB"
FORMAT_VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- checkpoint format --------------------------------------------------------


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays as float32 in manifest order (dict order)."""
    manifest = bytearray()
    data = bytearray()
    manifest += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        manifest += struct.pack("<I", len(raw)) + raw
        manifest += struct.pack("<I", arr32.ndim)
        manifest += struct.pack(f"<{arr32.ndim}I", *arr32.shape)
        manifest += struct.pack("<Q", len(data))
        data += arr32.tobytes()
    payload = CHECKPOINT_MAGIC + struct.pack("<I", FORMAT_VERSION) + bytes(manifest) + bytes(data)
    atomic_write_bytes(path, payload)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        (data_off,) = struct.unpack_from("<Q", blob, off)
        off += 8
        entries.append((name, shape, data_off))
    data_start = off
    out: dict[str, np.ndarray] = {}
    for name, shape, data_off in entries:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = data_start + data_off
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(shape)
        out[name] = arr.copy()
    return out


def pack_bits(raw: bytes) -> np.ndarray:
    """View raw bytes as float32 words (bit-preserving, zero-padded)."""
    pad = (-len(raw)) % 4
    buf = raw + b"\x00" * pad
    packed = np.frombuffer(buf, dtype="<f4").copy()
    return np.concatenate([np.array([len(raw)], dtype="<f4"), packed])


def unpack_bits(arr: np.ndarray) -> bytes:
    """Inverse of pack_bits."""
    n = int(arr[0])
    return np.ascontiguousarray(arr[1:], dtype="<f4").tobytes()[:n]


# -- embedding format ---------------------------------------------------------


def save_embeddings(path, vectors: np.ndarray, ids: list[str]) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise InputError("embedding matrix must be 2-dimensional")
    if vectors.shape[0] != len(ids):
        raise InputError("embedding count does not match id count")
    out = bytearray()
    out += EMBEDDING_MAGIC
    out += struct.pack("<III", FORMAT_VERSION, vectors.shape[0], vectors.shape[1])
    out += vectors.tobytes()
    for s in ids:
        raw = s.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    atomic_write_bytes(path, bytes(out))


def load_embeddings(path) -> tuple[np.ndarray, list[str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != EMBEDDING_MAGIC:
        raise InputError(f"{path}: not an embedding file (bad magic)")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported embedding version {version}")
    off = 16
    vectors = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off).reshape(count, dim).copy()
    off += 4 * count * dim
    ids = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        ids.append(blob[off : off + n].decode("utf-8"))
        off += n
    if off != len(blob):
        raise InputError(f"{path}: trailing bytes after id table")
    return vectors, ids
