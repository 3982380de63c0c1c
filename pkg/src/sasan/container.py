"""Binary container for named tensors.

Layout: magic ``SASN`` | version u16 | header-length u32 | JSON header |
payload. The header maps tensor names to dtype/shape; the payload is the
concatenation of the raw little-endian row-major arrays in header order.
An optional ``meta`` object in the header carries run metadata (config,
epoch, ...) for checkpoints.

Values round-trip bit-exactly, including NaN and infinities.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SASN"
VERSION = 1

_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "|u1"}
_DTYPE_NAMES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64", np.dtype("|u1"): "u8"}


def _dtype_name(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    name = _DTYPE_NAMES.get(np.dtype(dt.str.replace(">", "<")))
    if name is None:
        raise FormatError(f"unsupported dtype {arr.dtype} (supported: f32, f64, u8)")
    return name


def write_container(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays to ``path``. Names must be unique (dict keys are)."""
    entries = {}
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dname = _dtype_name(arr)
        arr = arr.astype(_DTYPES[dname], copy=False)
        entries[name] = {"dtype": dname, "shape": list(arr.shape)}
        blobs.append(arr.tobytes())  # always C-order bytes, 0-dim allowed
    header = {"tensors": entries}
    if meta is not None:
        header["meta"] = meta
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def read_container(path, with_meta: bool = False):
    """Read a container; returns name -> ndarray (and the meta dict if asked)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        fixed = f.read(6)
        if len(fixed) < 6:
            raise FormatError(f"{path}: truncated fixed header")
        version, hlen = struct.unpack("<HI", fixed)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        hbytes = f.read(hlen)
        if len(hbytes) < hlen:
            raise FormatError(f"{path}: truncated JSON header")
        try:
            header = json.loads(hbytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: invalid JSON header: {e}") from e
        if "tensors" not in header or not isinstance(header["tensors"], dict):
            raise FormatError(f"{path}: header missing 'tensors' map")
        payload = f.read()

    tensors = {}
    offset = 0
    for name, entry in header["tensors"].items():
        try:
            dname, shape = entry["dtype"], tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: invalid entry for tensor '{name}'") from e
        if dname not in _DTYPES:
            raise FormatError(f"{path}: tensor '{name}' has unknown dtype '{dname}'")
        dt = np.dtype(_DTYPES[dname])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(payload):
            raise FormatError(f"{path}: truncated payload at tensor '{name}'")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=dt).reshape(shape)
        tensors[name] = arr.copy()
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{path}: payload has {len(payload) - offset} trailing bytes")
    if with_meta:
        return tensors, header.get("meta")
    return tensors


def read_meta(path) -> dict | None:
    """Read only the meta block (payload is not loaded)."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise FormatError(f"{path}: bad magic, expected {MAGIC!r}")
        fixed = f.read(6)
        if len(fixed) < 6:
            raise FormatError(f"{path}: truncated fixed header")
        version, hlen = struct.unpack("<HI", fixed)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        hbytes = f.read(hlen)
        if len(hbytes) < hlen:
            raise FormatError(f"{path}: truncated JSON header")
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: invalid JSON header: {e}") from e
    return header.get("meta")
