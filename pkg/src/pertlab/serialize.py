"""Binary I/O: IDX files (the classic big-endian image/label format) and the
native columnar container used for datasets, nets and traces.

Container layout (little-endian):

    bytes 0-3   magic b"PLAB"
    bytes 4-7   uint32 version (currently 1)
    bytes 8-15  uint64 d   (row width)
    bytes 16-23 uint64 N   (row count)
    then        N*d float64, row-major
    then        N int8 labels

Every container has a JSON sidecar at <path>.meta.json (sorted keys) so a
file pair is self-describing and hash-stable.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PLAB"
VERSION = 1

IDX_IMAGE_MAGIC = 0x803
IDX_LABEL_MAGIC = 0x801


# ---------------------------------------------------------------------------
# IDX


def _open_maybe_gzip(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def load_idx(path) -> np.ndarray:
    """Read one IDX file (gzip transparently by .gz extension).

    Returns uint8 arrays: (n, rows, cols) for image files, (n,) for labels.
    """
    with _open_maybe_gzip(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise ValueError(f"{path}: truncated IDX header")
        magic, count = struct.unpack(">II", head)
        if magic == IDX_IMAGE_MAGIC:
            dims = f.read(8)
            if len(dims) < 8:
                raise ValueError(f"{path}: truncated IDX header")
            rows, cols = struct.unpack(">II", dims)
            payload = f.read(count * rows * cols)
            if len(payload) != count * rows * cols:
                raise ValueError(f"{path}: truncated IDX payload")
            return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
        if magic == IDX_LABEL_MAGIC:
            payload = f.read(count)
            if len(payload) != count:
                raise ValueError(f"{path}: truncated IDX payload")
            return np.frombuffer(payload, dtype=np.uint8)
        raise ValueError(f"{path}: unknown IDX magic {magic:#x}")


def write_idx(path, arr: np.ndarray) -> None:
    """Write a uint8 array back out as IDX (gzip by .gz extension)."""
    arr = np.asarray(arr, dtype=np.uint8)
    with _open_maybe_gzip(path, "wb") as f:
        if arr.ndim == 3:
            f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *arr.shape))
        elif arr.ndim == 1:
            f.write(struct.pack(">II", IDX_LABEL_MAGIC, arr.shape[0]))
        else:
            raise ValueError("IDX supports 1-d label or 3-d image arrays")
        f.write(arr.tobytes())


# ---------------------------------------------------------------------------
# native container


def save_container(path, rows: np.ndarray, labels: np.ndarray, meta: dict) -> None:
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int8)
    if rows.ndim != 2 or labels.shape != (rows.shape[0],):
        raise ValueError("rows must be (N, d) with one label per row")
    n, d = rows.shape
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQQ", VERSION, d, n))
        f.write(rows.astype("<f8", copy=False).tobytes())
        f.write(labels.tobytes())
    sidecar = json.dumps(meta, sort_keys=True, indent=2) + "\n"
    Path(str(path) + ".meta.json").write_text(sidecar)


def load_container(path) -> tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad container magic")
    version, d, n = struct.unpack("<IQQ", blob[4:24])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    need = 24 + n * d * 8 + n
    if len(blob) != need:
        raise ValueError(f"{path}: truncated container ({len(blob)} != {need} bytes)")
    rows = np.frombuffer(blob, dtype="<f8", count=n * d, offset=24).reshape(n, d)
    labels = np.frombuffer(blob, dtype=np.int8, count=n, offset=24 + n * d * 8)
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return rows.copy(), labels.copy(), meta
