"""Reading and writing the AVL1 volume container.

Layout, all little-endian::

    magic "AVL1" | dtype code (u8) | rank (u8) | rank x dim (u32) | payload

The payload is row-major with the last axis fastest. Decoding either returns
a volume or raises `VolumeFormatError` with the byte offset of the problem.
"""
import logging
import math
import struct
from pathlib import Path
from typing import Optional, Tuple, Type, Union

import numpy as np
import torch

from atlasaug.exceptions import ShapeMismatchError, VolumeFormatError
from atlasaug.retrying import retry_io
from atlasaug.volume import LabelMap, Volume

LOG = logging.getLogger(__name__)

MAGIC = b"AVL1"
MAX_RANK = 4
# magic, dtype code and rank
PREAMBLE_SIZE = len(MAGIC) + 2
DIM_SIZE = 4

PathLike = Union[str, Path]
VolumeLike = Union[Volume, LabelMap, np.ndarray]


class BaseVolumeCodec:
    """Convert between arrays and the payload of one dtype code."""

    code = None
    dtype = None
    max_rank = MAX_RANK

    @classmethod
    def encode(cls, array: np.ndarray) -> bytes:
        return np.ascontiguousarray(array, dtype=cls.dtype).tobytes(order="C")

    @classmethod
    def decode(cls, payload: bytes, dims: Tuple[int, ...]) -> np.ndarray:
        return np.frombuffer(payload, dtype=cls.dtype).reshape(dims).astype(cls.dtype.newbyteorder("="))

    @classmethod
    def first_invalid(cls, array: np.ndarray) -> Optional[int]:
        """Flat index of the first element the volume type cannot hold, if any."""
        return None

    @classmethod
    def wrap(cls, array: np.ndarray):
        raise NotImplementedError


class Float32VolumeCodec(BaseVolumeCodec):
    """Intensity volumes; a rank 4 array carries a leading channel axis."""

    code = 0
    dtype = np.dtype("<f4")

    @classmethod
    def first_invalid(cls, array: np.ndarray) -> Optional[int]:
        bad = np.flatnonzero(~np.isfinite(array))
        return int(bad[0]) if bad.size else None

    @classmethod
    def wrap(cls, array: np.ndarray) -> Volume:
        tensor = torch.from_numpy(array)
        if array.ndim == MAX_RANK:
            return Volume(tensor.unsqueeze(0))
        return Volume(tensor.reshape(1, 1, *array.shape))


class UInt16VolumeCodec(BaseVolumeCodec):
    """Label maps."""

    code = 1
    dtype = np.dtype("<u2")
    max_rank = MAX_RANK - 1

    @classmethod
    def wrap(cls, array: np.ndarray) -> LabelMap:
        return LabelMap.from_array(array.astype(np.int64))


CODECS = {codec.code: codec for codec in (Float32VolumeCodec, UInt16VolumeCodec)}


def encode_volume(array: np.ndarray, codec: Type[BaseVolumeCodec]) -> bytes:
    if not 1 <= array.ndim <= MAX_RANK:
        raise ShapeMismatchError(f"volume rank must lie in [1, {MAX_RANK}], got {array.ndim}")
    if 0 in array.shape:
        raise ShapeMismatchError(f"volume dims must be positive, got {array.shape}")
    header = MAGIC + struct.pack("<BB", codec.code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + codec.encode(array)


def decode_volume(data: bytes) -> Tuple[np.ndarray, Type[BaseVolumeCodec]]:
    """Parse a complete file content into an array and the codec that produced it."""
    if data[: len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise VolumeFormatError("truncated header: incomplete magic", offset=len(data))
        raise VolumeFormatError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < PREAMBLE_SIZE:
        raise VolumeFormatError("truncated header: missing dtype code or rank", offset=len(data))
    code, rank = data[len(MAGIC)], data[len(MAGIC) + 1]
    if code not in CODECS:
        raise VolumeFormatError(f"unknown dtype code {code}", offset=len(MAGIC))
    if not 1 <= rank <= MAX_RANK:
        raise VolumeFormatError(f"rank must lie in [1, {MAX_RANK}], got {rank}", offset=len(MAGIC) + 1)
    header_size = PREAMBLE_SIZE + DIM_SIZE * rank
    if len(data) < header_size:
        raise VolumeFormatError(
            f"truncated header: {rank} dims need {header_size} bytes, got {len(data)}", offset=len(data)
        )
    codec = CODECS[code]
    if rank > codec.max_rank:
        raise VolumeFormatError(
            f"{codec.__name__} volumes have rank <= {codec.max_rank}, got {rank}", offset=len(MAGIC) + 1
        )
    dims = struct.unpack_from(f"<{rank}I", data, PREAMBLE_SIZE)
    for axis, size in enumerate(dims):
        if size == 0:
            raise VolumeFormatError(f"dim {axis} is zero", offset=PREAMBLE_SIZE + DIM_SIZE * axis)
    expected = header_size + math.prod(dims) * codec.dtype.itemsize
    if len(data) < expected:
        raise VolumeFormatError(
            f"truncated payload: dims {dims} need {expected} bytes, got {len(data)}", offset=len(data)
        )
    if len(data) > expected:
        raise VolumeFormatError(f"{len(data) - expected} trailing bytes after the payload", offset=expected)
    array = codec.decode(data[header_size:], dims)
    index = codec.first_invalid(array)
    if index is not None:
        raise VolumeFormatError(
            f"non-finite value at element {index}", offset=header_size + index * codec.dtype.itemsize
        )
    return array, codec


def read_volume(path: PathLike) -> Union[Volume, LabelMap]:
    """Load a file as a `Volume` (dtype code 0) or a `LabelMap` (dtype code 1)."""
    data = Path(path).read_bytes()
    array, codec = decode_volume(data)
    LOG.debug("read %s: %s %s", path, codec.__name__, array.shape)
    return codec.wrap(array)


def write_volume(path: PathLike, value: VolumeLike):
    array, codec = _as_array(value)
    _write_bytes(Path(path), encode_volume(array, codec))


@retry_io
def _write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _as_array(value: VolumeLike) -> Tuple[np.ndarray, Type[BaseVolumeCodec]]:
    if isinstance(value, Volume):
        if value.data.shape[0] != 1:
            raise ShapeMismatchError(f"only single volumes can be written, got batch {value.data.shape[0]}")
        return value.numpy(), Float32VolumeCodec
    if isinstance(value, LabelMap):
        if value.data.shape[0] != 1:
            raise ShapeMismatchError(
                f"only single label maps can be written, got batch {value.data.shape[0]}"
            )
        value = value.numpy()
    else:
        value = np.asarray(value)
        if value.dtype.kind == "f":
            return value, Float32VolumeCodec
    if value.size and (value.min() < 0 or value.max() > np.iinfo(np.uint16).max):
        raise ShapeMismatchError("label values must fit in uint16")
    return value, UInt16VolumeCodec
