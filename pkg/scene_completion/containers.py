"""
Binary Container
Versioned file format shared by target sets, scenes, latent grids, decoder params, checkpoints and voxel grids

Layout (all integers little-endian):
    magic       4 bytes   b"SDIF"
    version     uint16
    kind        uint16 length + utf-8 text      (e.g. "target_set", "checkpoint")
    header      uint32 length + utf-8 JSON      (sorted keys, scalar metadata)
    n_records   uint32
    record*     name   (uint16 length + utf-8)
                dtype  (uint8 length + numpy dtype string, always little-endian)
                shape  (uint8 ndim + ndim * uint64)
                data   (uint64 byte count + row-major bytes)
"""

import json
import struct
from typing import Any, Dict, Tuple

import numpy as np

from .errors import DataFormatError

MAGIC = b"SDIF"
VERSION = 1


def _le(array: np.ndarray) -> np.ndarray:
    """Row-major little-endian copy of an array"""
    array = np.ascontiguousarray(array)
    if array.dtype.byteorder == ">" or (array.dtype.byteorder == "=" and not np.little_endian):
        array = array.astype(array.dtype.newbyteorder("<"))
    return array


def write_container(path: str, kind: str, header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> None:
    """Write arrays plus JSON header; output bytes depend only on the inputs"""
    kind_bytes = kind.encode("utf-8")
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<H", len(kind_bytes)) + kind_bytes)
        f.write(struct.pack("<I", len(header_bytes)) + header_bytes)
        f.write(struct.pack("<I", len(arrays)))

        for name, array in arrays.items():
            array = _le(np.asarray(array))
            name_bytes = name.encode("utf-8")
            dtype_bytes = array.dtype.str.replace("|", "<").encode("ascii")
            data = array.tobytes(order="C")

            f.write(struct.pack("<H", len(name_bytes)) + name_bytes)
            f.write(struct.pack("<B", len(dtype_bytes)) + dtype_bytes)
            f.write(struct.pack("<B", array.ndim))
            for dim in array.shape:
                f.write(struct.pack("<Q", dim))
            f.write(struct.pack("<Q", len(data)))
            f.write(data)


class _Reader:
    def __init__(self, path, blob):
        self.path = path
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise DataFormatError(f"{self.path}: truncated container (needed {n} bytes at offset {self.pos})")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, n, what, encoding="utf-8"):
        try:
            return self.take(n).decode(encoding)
        except UnicodeDecodeError:
            raise DataFormatError(f"{self.path}: {what} is not valid {encoding} text") from None


def read_container(path: str, expected_kind: str = None) -> Tuple[str, Dict[str, Any], Dict[str, np.ndarray]]:
    """Read a container; returns (kind, header, arrays)"""
    with open(path, "rb") as f:
        blob = f.read()

    reader = _Reader(path, blob)
    if reader.take(4) != MAGIC:
        raise DataFormatError(f"{path}: not a container file (bad magic bytes)")
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")

    (kind_len,) = reader.unpack("<H")
    kind = reader.text(kind_len, "kind")
    if expected_kind is not None and kind != expected_kind:
        raise DataFormatError(f"{path}: expected a '{expected_kind}' container, found '{kind}'")

    (header_len,) = reader.unpack("<I")
    try:
        header = json.loads(reader.text(header_len, "header"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: corrupt header ({e})") from None
    if not isinstance(header, dict):
        raise DataFormatError(f"{path}: header must be a JSON object")

    (n_records,) = reader.unpack("<I")
    arrays = {}
    for _ in range(n_records):
        (name_len,) = reader.unpack("<H")
        name = reader.text(name_len, "record name")
        (dtype_len,) = reader.unpack("<B")
        dtype_str = reader.text(dtype_len, f"dtype of '{name}'", "ascii")
        try:
            dtype = np.dtype(dtype_str)
        except (TypeError, ValueError):
            raise DataFormatError(f"{path}: record '{name}' has unknown dtype '{dtype_str}'") from None
        if dtype.hasobject:
            raise DataFormatError(f"{path}: record '{name}' has object dtype")
        (ndim,) = reader.unpack("<B")
        shape = tuple(reader.unpack("<Q")[0] for _ in range(ndim))
        (nbytes,) = reader.unpack("<Q")
        data = reader.take(nbytes)
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise DataFormatError(f"{path}: record '{name}' holds {nbytes} bytes, shape needs {expected}")
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()

    if reader.pos != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - reader.pos} trailing bytes after last record")
    return kind, header, arrays
