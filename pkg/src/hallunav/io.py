"""Binary artifact containers.

Three little-endian container kinds, all headed by an 8-byte magic and a
u32 version so artifacts are self-identifying:

* flat-array (``HLNVARR1``): attrs json + named float64 arrays with shapes;
  used for network weights and plan corpora.
* scan log (``HLNVSCN1``): LiDAR geometry header + float32 range records.
* dataset (``HLNVDST1``): LiDAR geometry + history length header + fixed
  (L*beams + 2 goal + 2 action) float32 records.

Writers are deterministic: identical inputs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

ARRAY_MAGIC = b"HLNVARR1"
SCAN_MAGIC = b"HLNVSCN1"
DATASET_MAGIC = b"HLNVDST1"
VERSION = 1


class ContainerFormatError(ValueError):
    """Raised when a file does not match the expected container layout."""


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _pack_attrs(attrs: dict | None) -> bytes:
    blob = json.dumps(attrs or {}, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(blob)) + blob


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ContainerFormatError(f"truncated container while reading {what}")
    return data


def _unpack_attrs(f) -> dict:
    (n,) = struct.unpack("<I", _read_exact(f, 4, "attrs length"))
    return json.loads(_read_exact(f, n, "attrs"))


def _check_magic(f, magic: bytes, path) -> None:
    got = f.read(8)
    if got != magic:
        raise ContainerFormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (ver,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if ver != VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {ver}")


# ----------------------------------------------------------------------
# flat-array container
# ----------------------------------------------------------------------

def write_arrays(path, arrays: dict[str, np.ndarray], attrs: dict | None = None) -> None:
    path = Path(path)
    parts = [ARRAY_MAGIC, struct.pack("<I", VERSION), _pack_attrs(attrs)]
    parts.append(struct.pack("<I", len(arrays)))
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{max(arr.ndim, 0)}I", *arr.shape))
        payloads.append(arr.tobytes())
    path.write_bytes(b"".join(parts + payloads))


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        _check_magic(f, ARRAY_MAGIC, path)
        attrs = _unpack_attrs(f)
        (count,) = struct.unpack("<I", _read_exact(f, 4, "array count"))
        metas = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            metas.append((name, shape))
        arrays = {}
        for name, shape in metas:
            n = int(np.prod(shape)) if shape else 1
            buf = _read_exact(f, 8 * n, f"array {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, attrs


# ----------------------------------------------------------------------
# scan log container
# ----------------------------------------------------------------------

def write_scan_log(path, ranges: np.ndarray, fov: float, max_range: float, attrs: dict | None = None) -> None:
    """``ranges`` is (count, beam_count) float; stored as float32 records."""
    ranges = np.asarray(ranges, dtype=np.float32)
    if ranges.ndim != 2:
        raise ValueError("ranges must be (count, beam_count)")
    header = [
        SCAN_MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", ranges.shape[1]),
        struct.pack("<d", float(fov)),
        struct.pack("<d", float(max_range)),
        _pack_attrs(attrs),
        struct.pack("<Q", ranges.shape[0]),
    ]
    Path(path).write_bytes(b"".join(header) + ranges.tobytes())


def read_scan_log(path) -> tuple[np.ndarray, float, float, dict]:
    path = Path(path)
    with open(path, "rb") as f:
        _check_magic(f, SCAN_MAGIC, path)
        (beams,) = struct.unpack("<I", _read_exact(f, 4, "beam count"))
        (fov,) = struct.unpack("<d", _read_exact(f, 8, "fov"))
        (max_range,) = struct.unpack("<d", _read_exact(f, 8, "max range"))
        attrs = _unpack_attrs(f)
        (count,) = struct.unpack("<Q", _read_exact(f, 8, "record count"))
        buf = _read_exact(f, 4 * count * beams, "records")
        ranges = np.frombuffer(buf, dtype="<f4").reshape(count, beams).copy()
    return ranges, fov, max_range, attrs


# ----------------------------------------------------------------------
# training dataset container
# ----------------------------------------------------------------------

def write_dataset_records(
    path,
    histories: np.ndarray,  # (K, L, beams)
    goals: np.ndarray,  # (K, 2)
    actions: np.ndarray,  # (K, 2)
    fov: float,
    max_range: float,
    attrs: dict | None = None,
) -> None:
    histories = np.asarray(histories, dtype=np.float32)
    goals = np.asarray(goals, dtype=np.float32)
    actions = np.asarray(actions, dtype=np.float32)
    K, L, beams = histories.shape
    if goals.shape != (K, 2) or actions.shape != (K, 2):
        raise ValueError("goals/actions must be (K, 2)")
    records = np.concatenate(
        [histories.reshape(K, L * beams), goals, actions], axis=1
    ).astype(np.float32)
    header = [
        DATASET_MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", beams),
        struct.pack("<I", L),
        struct.pack("<d", float(fov)),
        struct.pack("<d", float(max_range)),
        _pack_attrs(attrs),
        struct.pack("<Q", K),
    ]
    Path(path).write_bytes(b"".join(header) + records.tobytes())


def read_dataset_records(path):
    """Returns (histories, goals, actions, fov, max_range, attrs)."""
    path = Path(path)
    with open(path, "rb") as f:
        _check_magic(f, DATASET_MAGIC, path)
        (beams,) = struct.unpack("<I", _read_exact(f, 4, "beam count"))
        (L,) = struct.unpack("<I", _read_exact(f, 4, "history length"))
        (fov,) = struct.unpack("<d", _read_exact(f, 8, "fov"))
        (max_range,) = struct.unpack("<d", _read_exact(f, 8, "max range"))
        attrs = _unpack_attrs(f)
        (K,) = struct.unpack("<Q", _read_exact(f, 8, "record count"))
        width = L * beams + 4
        buf = _read_exact(f, 4 * K * width, "records")
        flat = np.frombuffer(buf, dtype="<f4").reshape(K, width)
        histories = flat[:, : L * beams].reshape(K, L, beams).copy()
        goals = flat[:, L * beams : L * beams + 2].copy()
        actions = flat[:, L * beams + 2 :].copy()
    return histories, goals, actions, fov, max_range, attrs
