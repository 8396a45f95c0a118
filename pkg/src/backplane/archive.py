"""Flat binary containers for surface sweeps and perturbation sets.

Both formats share the same skeleton: magic, version, a fixed header, an
index table written up front (the enumeration is deterministic, so the table
is known before any payload exists), then contiguous little-endian blobs.
Blobs append one at a time, which is what makes interrupted sweeps resumable:
reopen, count whole blobs, continue from there.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SURFACE_MAGIC = b"ABHS"
PERTURBATION_MAGIC = b"ABPS"
ARCHIVE_VERSION = 1
_DTYPE_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class ArchiveError(IOError):
    pass


def _dtype_tag(dtype) -> int:
    tag = np.dtype(dtype).itemsize
    if tag not in _DTYPE_TAGS:
        raise ArchiveError(f"unsupported dtype {dtype}")
    return tag


@dataclass
class SurfaceArchiveHeader:
    mode: int
    layer: int  # conv ordinal, -1 for mode 0
    eval_k: float
    dtype: np.dtype
    surface_shape: tuple
    index: list  # list of (s, j, i, k), -1 where not applicable


def _pack_surface_header(h: SurfaceArchiveHeader) -> bytes:
    out = bytearray()
    out += SURFACE_MAGIC
    out += struct.pack("<HBhdB", ARCHIVE_VERSION, h.mode, h.layer, h.eval_k, _dtype_tag(h.dtype))
    out += struct.pack("<III", *h.surface_shape)
    out += struct.pack("<I", len(h.index))
    for s, j, i, k in h.index:
        out += struct.pack("<iiii", s, j, i, k)
    return bytes(out)


def _parse_surface_header(raw: bytes, path) -> tuple:
    if raw[:4] != SURFACE_MAGIC:
        raise ArchiveError(f"{path}: bad magic {raw[:4]!r}")
    version, mode, layer, eval_k, tag = struct.unpack_from("<HBhdB", raw, 4)
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: version {version}")
    off = 4 + struct.calcsize("<HBhdB")
    shape = struct.unpack_from("<III", raw, off)
    off += 12
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    index = []
    for _ in range(count):
        index.append(struct.unpack_from("<iiii", raw, off))
        off += 16
    header = SurfaceArchiveHeader(
        mode=mode, layer=layer, eval_k=eval_k, dtype=_DTYPE_TAGS[tag], surface_shape=tuple(shape), index=index
    )
    return header, off


class SurfaceArchiveWriter:
    """Writes the header + index eagerly, then streams blobs one surface at a time."""

    def __init__(self, path, header: SurfaceArchiveHeader, resume: bool = False):
        self.path = path
        self.header = header
        self.blob_bytes = int(np.prod(header.surface_shape)) * header.dtype.itemsize
        self.written = 0
        packed = _pack_surface_header(header)
        if resume:
            try:
                with open(path, "rb") as fh:
                    raw = fh.read()
            except FileNotFoundError:
                raw = None
            if raw is not None:
                try:
                    existing, data_off = _parse_surface_header(raw, path)
                except (ArchiveError, struct.error) as exc:
                    raise ArchiveError(f"{path}: cannot resume over unreadable archive: {exc}")
                if _pack_surface_header(existing) != packed:
                    raise ArchiveError(f"{path}: existing archive does not match this request")
                complete = max(len(raw) - data_off, 0) // self.blob_bytes
                with open(path, "r+b") as fh:
                    fh.truncate(data_off + complete * self.blob_bytes)
                self.written = complete
                self._fh = open(path, "ab")
                return
        self._fh = open(path, "wb")
        self._fh.write(packed)

    def append(self, values: np.ndarray) -> None:
        if tuple(values.shape) != self.header.surface_shape:
            raise ArchiveError(f"surface shape {values.shape} != {self.header.surface_shape}")
        if self.written >= len(self.header.index):
            raise ArchiveError("archive already holds every indexed surface")
        self._fh.write(np.ascontiguousarray(values, dtype=self.header.dtype).tobytes())
        self.written += 1

    def close(self) -> None:
        self._fh.close()

    @property
    def complete(self) -> bool:
        return self.written == len(self.header.index)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SurfaceArchiveReader:
    def __init__(self, path):
        self.path = path
        with open(path, "rb") as fh:
            raw = fh.read()
        self.header, self._data_off = _parse_surface_header(raw, path)
        self.blob_bytes = int(np.prod(self.header.surface_shape)) * self.header.dtype.itemsize
        payload = len(raw) - self._data_off
        if payload % self.blob_bytes:
            raise ArchiveError(f"{path}: trailing partial surface ({payload % self.blob_bytes} bytes)")
        self.count = payload // self.blob_bytes
        if self.count > len(self.header.index):
            raise ArchiveError(f"{path}: {self.count} surfaces but index lists {len(self.header.index)}")
        self._raw = raw

    @property
    def complete(self) -> bool:
        return self.count == len(self.header.index)

    def surface(self, n: int) -> np.ndarray:
        if not 0 <= n < self.count:
            raise ArchiveError(f"{self.path}: no surface {n} (holds {self.count})")
        flat = np.frombuffer(
            self._raw,
            dtype=self.header.dtype,
            count=int(np.prod(self.header.surface_shape)),
            offset=self._data_off + n * self.blob_bytes,
        )
        return flat.reshape(self.header.surface_shape).astype(self.header.dtype.newbyteorder("="))

    def __iter__(self):
        for n in range(self.count):
            yield self.header.index[n], self.surface(n)


# ---------------------------------------------------------------------------
# Perturbation sets

_PROVENANCE_TAGS = {"sb1": 0, "scaled": 1, "gaussian": 2}
_PROVENANCE_NAMES = {v: k for k, v in _PROVENANCE_TAGS.items()}


def write_perturbations(path, records, input_shape, dtype) -> None:
    """records: iterable with .values/.provenance/.intended/.achieved/.beta/.l2."""
    records = list(records)
    dtype = _DTYPE_TAGS[_dtype_tag(dtype)]
    out = bytearray()
    out += PERTURBATION_MAGIC
    out += struct.pack("<HB", ARCHIVE_VERSION, _dtype_tag(dtype))
    out += struct.pack("<III", *input_shape)
    out += struct.pack("<I", len(records))
    for r in records:
        if r.provenance not in _PROVENANCE_TAGS:
            raise ArchiveError(f"unknown provenance {r.provenance!r}; expected one of {sorted(_PROVENANCE_TAGS)}")
        out += struct.pack(
            "<Bhhdd", _PROVENANCE_TAGS[r.provenance], int(r.intended), int(r.achieved), float(r.beta), float(r.l2)
        )
    for r in records:
        out += np.ascontiguousarray(r.values, dtype=dtype).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_perturbations(path):
    """Returns (rows, tensors); each row is a dict keyed like the record fields."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PERTURBATION_MAGIC:
        raise ArchiveError(f"{path}: bad magic {raw[:4]!r}")
    version, tag = struct.unpack_from("<HB", raw, 4)
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: version {version}")
    dtype = _DTYPE_TAGS[tag]
    shape = struct.unpack_from("<III", raw, 7)
    (count,) = struct.unpack_from("<I", raw, 19)
    off = 23
    rows = []
    for _ in range(count):
        prov, intended, achieved, beta, l2 = struct.unpack_from("<Bhhdd", raw, off)
        rows.append(
            {"provenance": _PROVENANCE_NAMES[prov], "intended": intended, "achieved": achieved, "beta": beta, "l2": l2}
        )
        off += struct.calcsize("<Bhhdd")
    size = int(np.prod(shape))
    tensors = []
    for n in range(count):
        flat = np.frombuffer(raw, dtype=dtype, count=size, offset=off + n * size * dtype.itemsize)
        tensors.append(flat.reshape(shape).astype(dtype.newbyteorder("=")))
    expected = off + count * size * dtype.itemsize
    if len(raw) != expected:
        raise ArchiveError(f"{path}: size {len(raw)}, expected {expected}")
    return rows, tensors
