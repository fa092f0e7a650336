"""
Little-endian binary framing shared by the model, forest, KATANA, cache and
raw-tensor files.

Every file starts with::

    magic    4 bytes
    version  u16
    meta_len u32
    meta     meta_len bytes of UTF-8 JSON (sorted keys)

followed by format-specific payload written through ``BinaryWriter``.
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .exceptions import FormatError

PathLike = Union[str, Path]


class BinaryWriter:
    def __init__(self):
        self._chunks = []

    def header(self, magic: bytes, version: int, meta: Dict[str, Any]) -> "BinaryWriter":
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        self._chunks.append(magic)
        self._chunks.append(struct.pack("<HI", version, len(blob)))
        self._chunks.append(blob)
        return self

    def u32(self, value: int) -> "BinaryWriter":
        self._chunks.append(struct.pack("<I", value))
        return self

    def raw(self, data: bytes) -> "BinaryWriter":
        self._chunks.append(data)
        return self

    def array(self, arr: np.ndarray, dtype: str) -> "BinaryWriter":
        """ndim (u32), dims (u32 each), then the row-major payload in ``dtype``."""
        arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
        self.u32(arr.ndim)
        for dim in arr.shape:
            self.u32(dim)
        self._chunks.append(arr.tobytes(order="C"))
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)

    def save(self, path: PathLike) -> None:
        Path(path).write_bytes(self.getvalue())


class BinaryReader:
    def __init__(self, data: bytes, path: Optional[str] = None):
        self._data = data
        self._pos = 0
        self._path = path

    @classmethod
    def open(cls, path: PathLike) -> "BinaryReader":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read file: {exc}", path=str(path)) from exc
        return cls(data, path=str(path))

    @property
    def offset(self) -> int:
        return self._pos

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise FormatError(
                f"truncated file: needed {n} bytes, {len(self._data) - self._pos} left",
                path=self._path,
                offset=self._pos,
            )
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def header(self, magic: bytes, versions: Tuple[int, ...]) -> Tuple[int, Dict[str, Any]]:
        found = self._take(len(magic))
        if found != magic:
            raise FormatError(f"bad magic {found!r}, expected {magic!r}", path=self._path, offset=0)
        version, meta_len = struct.unpack("<HI", self._take(6))
        if version not in versions:
            raise FormatError(
                f"unsupported format version {version}, expected one of {list(versions)}",
                path=self._path,
                offset=len(magic),
            )
        meta_at = self._pos
        try:
            meta = json.loads(self._take(meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt metadata block: {exc}", path=self._path, offset=meta_at) from exc
        return version, meta

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def peek(self, n: int) -> bytes:
        return self._data[self._pos:self._pos + n]

    def array(self, dtype: str) -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u32() for _ in range(ndim))
        le = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        buf = self._take(count * le.itemsize)
        return np.frombuffer(buf, dtype=le).reshape(shape).astype(np.dtype(dtype), copy=True)

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise FormatError(
                f"{len(self._data) - self._pos} trailing bytes after payload",
                path=self._path,
                offset=self._pos,
            )


def content_hash(data: Union[bytes, np.ndarray]) -> str:
    """sha256 hex digest of raw bytes or of an array's dtype, shape and buffer."""
    h = hashlib.sha256()
    if isinstance(data, np.ndarray):
        arr = np.ascontiguousarray(data)
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    else:
        h.update(data)
    return h.hexdigest()


def file_hash(path: PathLike) -> str:
    return content_hash(Path(path).read_bytes())
