"""
Little-endian binary container shared by checkpoint (MUXC) and dataset (MUXD)
files: 4-byte magic, u32 version, body, trailing CRC32 of everything before it.
"""

import logging
import os
import struct
import zlib

import numpy as np

from errors import StorageError

logger = logging.getLogger(__name__)


class BinaryWriter:
    """Accumulates a container body and appends the CRC on finish()"""

    def __init__(self, magic, version):
        self._parts = [magic, struct.pack("<I", version)]

    def u32(self, value):
        self._parts.append(struct.pack("<I", int(value)))

    def text(self, value):
        raw = value.encode("utf-8")
        self.u32(len(raw))
        self._parts.append(raw)

    def f32_array(self, array):
        self._parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())

    def u32_array(self, array):
        self._parts.append(np.ascontiguousarray(array, dtype="<u4").tobytes())

    def tensor(self, array):
        """Tensor record: u32 rank, u32 dims, f32 data"""
        array = np.asarray(array)
        self.u32(array.ndim)
        for dim in array.shape:
            self.u32(dim)
        self.f32_array(array)

    def finish(self):
        body = b"".join(self._parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class BinaryReader:
    """
    Sequential reader over a container blob.

    Args:
        blob: complete file contents
        magic: expected 4-byte magic
        supported_version: highest version this code understands
        what: label used in error messages (usually the path)
    """

    def __init__(self, blob, magic, supported_version, what):
        self.what = what
        if len(blob) < 12:
            raise StorageError(f"{what}: file truncated ({len(blob)} bytes)")
        if blob[:4] != magic:
            raise StorageError(f"{what}: bad magic {blob[:4]!r}, expected {magic!r}")
        self.version = struct.unpack("<I", blob[4:8])[0]
        if self.version > supported_version:
            raise StorageError(
                f"{what}: file version {self.version} is newer than supported version {supported_version}"
            )
        stored_crc = struct.unpack("<I", blob[-4:])[0]
        if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
            raise StorageError(f"{what}: checksum mismatch (file truncated or corrupted)")
        self._blob = blob[:-4]
        self._pos = 8

    def _take(self, n):
        if self._pos + n > len(self._blob):
            raise StorageError(f"{self.what}: unexpected end of data")
        chunk = self._blob[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def text(self):
        length = self.u32()
        try:
            return self._take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise StorageError(f"{self.what}: invalid UTF-8 text ({e})")

    def f32_array(self, shape):
        count = int(np.prod(shape)) if len(shape) else 1
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)

    def u32_array(self, count):
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)

    def tensor(self):
        rank = self.u32()
        shape = tuple(self.u32() for _ in range(rank))
        return self.f32_array(shape)

    def ensure_consumed(self):
        if self._pos != len(self._blob):
            raise StorageError(f"{self.what}: {len(self._blob) - self._pos} unexpected trailing bytes")


def write_blob(path, blob):
    """Write bytes atomically (temp file then rename)"""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        tmp_path = f"{path}.tmp"
        with open(tmp_path, "wb") as f:
            f.write(blob)
        os.replace(tmp_path, path)
    except OSError as e:
        raise StorageError(f"could not write {path}: {e}")
    logger.debug("wrote %d bytes to %s", len(blob), path)


def read_blob(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise StorageError(f"could not read {path}: {e}")
