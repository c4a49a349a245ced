"""Binary and text file formats, all written atomically (temp file + rename).

TNS3  magic ``TNS3``, u8 version = 1, 3 x u32 dims, f64 values, first index fastest
TFQ1  magic ``TFQ1`` then four TNS3 blocks: U, V, W (as n x r x 1) and S
OBS1  magic ``OBS1``, u8 version = 1, 3 x u32 dims, f64 p, u64 count,
      then count records (u32 i1, u32 i2, u32 i3, f64 value), sorted
YVC1  magic ``YVC1``, u64 m, m x f64

Everything is little-endian.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor_core import FactorQuad, as_tensor3

VERSION = 1
# mkstemp creates 0600 files; published outputs get the usual umask-derived mode
_UMASK = os.umask(0)
os.umask(_UMASK)
_OBS_RECORD = np.dtype([("i1", "<u4"), ("i2", "<u4"), ("i3", "<u4"), ("value", "<f8")])


@contextmanager
def atomic_open(path, mode: str = "wb"):
    """Write to a temporary sibling of ``path`` and rename it into place on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _expect(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise FormatError(f"truncated file while reading {what}")
    return b


def _write_tns3_block(fh, X: np.ndarray) -> None:
    X = as_tensor3(X)
    fh.write(b"TNS3")
    fh.write(struct.pack("<B3I", VERSION, *X.shape))
    fh.write(X.ravel(order="F").astype("<f8").tobytes())


def _read_tns3_block(fh) -> np.ndarray:
    if _expect(fh, 4, "magic") != b"TNS3":
        raise FormatError("not a TNS3 block")
    version, n1, n2, n3 = struct.unpack("<B3I", _expect(fh, 13, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported TNS3 version {version}")
    count = n1 * n2 * n3
    data = np.frombuffer(_expect(fh, 8 * count, "values"), dtype="<f8").astype(np.float64)
    return data.reshape((n1, n2, n3), order="F")


def write_tns3(path, X: np.ndarray) -> None:
    with atomic_open(path) as fh:
        _write_tns3_block(fh, X)


def read_tns3(path) -> np.ndarray:
    with open(path, "rb") as fh:
        X = _read_tns3_block(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after TNS3 payload")
    return X


def write_tfq1(path, F: FactorQuad) -> None:
    with atomic_open(path) as fh:
        fh.write(b"TFQ1")
        for A in F.factors:
            _write_tns3_block(fh, A[:, :, None])
        _write_tns3_block(fh, F.S)


def read_tfq1(path) -> FactorQuad:
    with open(path, "rb") as fh:
        if _expect(fh, 4, "magic") != b"TFQ1":
            raise FormatError("not a TFQ1 file")
        blocks = [_read_tns3_block(fh) for _ in range(4)]
    for k, B in enumerate(blocks[:3]):
        if B.shape[2] != 1:
            raise FormatError(f"factor block {k + 1} must have a trailing unit dimension")
    return FactorQuad(blocks[0][:, :, 0], blocks[1][:, :, 0], blocks[2][:, :, 0], blocks[3])


def write_obs1(path, dims, p: float, indices: np.ndarray, values: np.ndarray) -> None:
    rec = np.empty(len(values), dtype=_OBS_RECORD)
    rec["i1"], rec["i2"], rec["i3"] = indices[:, 0], indices[:, 1], indices[:, 2]
    rec["value"] = values
    with atomic_open(path) as fh:
        fh.write(b"OBS1")
        fh.write(struct.pack("<B3IdQ", VERSION, *dims, float(p), len(values)))
        fh.write(rec.tobytes())


def read_obs1(path):
    """Return ``(dims, p, indices (count x 3, int64), values)``."""
    with open(path, "rb") as fh:
        if _expect(fh, 4, "magic") != b"OBS1":
            raise FormatError("not an OBS1 file")
        version, n1, n2, n3, p, count = struct.unpack("<B3IdQ", _expect(fh, 29, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported OBS1 version {version}")
        rec = np.frombuffer(_expect(fh, count * _OBS_RECORD.itemsize, "records"), dtype=_OBS_RECORD)
    idx = np.stack([rec["i1"], rec["i2"], rec["i3"]], axis=1).astype(np.int64)
    return (n1, n2, n3), p, idx, rec["value"].astype(np.float64)


def write_yvc1(path, y: np.ndarray) -> None:
    y = np.asarray(y, dtype=np.float64).ravel()
    with atomic_open(path) as fh:
        fh.write(b"YVC1")
        fh.write(struct.pack("<Q", y.size))
        fh.write(y.astype("<f8").tobytes())


def read_yvc1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _expect(fh, 4, "magic") != b"YVC1":
            raise FormatError("not a YVC1 file")
        (m,) = struct.unpack("<Q", _expect(fh, 8, "length"))
        return np.frombuffer(_expect(fh, 8 * m, "values"), dtype="<f8").astype(np.float64)


def write_json(path, obj) -> None:
    with atomic_open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_text(path, text: str) -> None:
    with atomic_open(path, "w") as fh:
        fh.write(text)
