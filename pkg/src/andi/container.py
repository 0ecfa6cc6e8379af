"""Binary tensor container: "NTF1" magic, JSON header, raw little-endian payload.

A file is one or more back-to-back records. Each record is::

    b"NTF1" | u32 header-length (LE) | UTF-8 JSON header | payload bytes

with header keys ``dims`` (list of ints), ``dtype`` ("f32" or "u8"),
``layout`` (always "row-major-channels-last") and ``name``. The payload
holds exactly prod(dims) elements in row-major order, little-endian.
Headers are canonical JSON (sorted keys, no spaces) so identical tensors
serialize to identical bytes.
"""

import json
import struct

import numpy as np

from .errors import FormatError, ValidationError

__all__ = ["write_tensors", "read_tensors", "write_tensor", "read_tensor"]

MAGIC = b"NTF1"
LAYOUT = "row-major-channels-last"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8"}


def _encode_record(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    if array.dtype not in _DTYPE_NAMES:
        raise ValidationError(
            f"tensor {name!r} has unsupported dtype {array.dtype}; use f32 or u8"
        )
    header = {
        "dims": list(array.shape),
        "dtype": _DTYPE_NAMES[array.dtype],
        "layout": LAYOUT,
        "name": name,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = array.astype(_DTYPES[header["dtype"]], copy=False).tobytes()
    return MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload


def write_tensors(path, items) -> None:
    """Write named tensors ((name, array) pairs) as consecutive records."""
    blob = b"".join(_encode_record(name, arr) for name, arr in items)
    with open(path, "wb") as f:
        f.write(blob)


def write_tensor(path, name: str, array: np.ndarray) -> None:
    write_tensors(path, [(name, array)])


def read_tensors(path) -> dict:
    """Read every record of a container file into an ordered name -> array dict."""
    with open(path, "rb") as f:
        blob = f.read()
    out = {}
    pos = 0
    while pos < len(blob):
        if blob[pos : pos + 4] != MAGIC:
            raise FormatError(f"{path}: bad magic at byte {pos}")
        pos += 4
        if pos + 4 > len(blob):
            raise FormatError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<I", blob[pos : pos + 4])
        pos += 4
        if pos + header_len > len(blob):
            raise FormatError(f"{path}: truncated header")
        try:
            header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable header: {exc}") from exc
        pos += header_len
        try:
            dims = tuple(int(d) for d in header["dims"])
            dtype = _DTYPES[header["dtype"]]
            name = header["name"]
            layout = header["layout"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed header fields: {exc}") from exc
        if layout != LAYOUT:
            raise FormatError(f"{path}: unsupported layout {layout!r}")
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(blob):
            raise FormatError(
                f"{path}: payload for {name!r} is {len(blob) - pos} bytes, "
                f"expected {nbytes}"
            )
        array = np.frombuffer(blob[pos : pos + nbytes], dtype=dtype).reshape(dims).copy()
        pos += nbytes
        if name in out:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        out[name] = array
    return out


def read_tensor(path, name: str = None) -> np.ndarray:
    """Read a single-record container (or a named record from a multi file)."""
    tensors = read_tensors(path)
    if name is not None:
        if name not in tensors:
            raise FormatError(f"{path}: no tensor named {name!r}")
        return tensors[name]
    if len(tensors) != 1:
        raise FormatError(
            f"{path}: expected exactly one tensor, found {len(tensors)}"
        )
    return next(iter(tensors.values()))
