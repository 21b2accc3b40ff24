"""Heal/mask maps and their canonical binary encoding.

Layout of an encoded map (all integers little-endian)::

    offset  size  field
    0       8     magic b"ASCHMAP1"
    8       4     rows (uint32)
    12      4     cols (uint32)
    16      4     skew in microvolts (int32)
    20      1     source (0 = static, 1 = dynamic)
    21      4     vdd at check, signed Q16.16 volts
    25      4     temperature at check, signed Q16.16 degC
    29      B     heal bitmap
    29+B    B     mask bitmap

``B = ceil(rows*cols / 8)``. Bitmaps are row-major and LSB-first within each
byte. The same bytes travel as the SESSION_MAP protocol payload.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .cell import Environment

MAP_MAGIC = b"ASCHMAP1"
_HEADER = struct.Struct("<8sIIiBii")
HEADER_SIZE = _HEADER.size


class MapSource(enum.IntEnum):
    STATIC = 0
    DYNAMIC = 1


class MalformedMap(ValueError):
    pass


def to_q16(value: float) -> int:
    return int(round(value * 65536.0))


def from_q16(raw: int) -> float:
    return raw / 65536.0


def pack_bits_lsb(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=bool).ravel(), bitorder="little").tobytes()


def unpack_bits_lsb(data: bytes, count: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count, bitorder="little").astype(bool)


@dataclass(frozen=True, eq=False)
class StabilizationMap:
    """Per-cell classification.

    Cells with neither flag are originally stable, ``heal`` cells are read in
    the healed configuration, ``mask`` cells are skipped.
    """

    heal: np.ndarray
    mask: np.ndarray
    skew_mV: float
    source: MapSource
    env_at_check: Environment

    def __post_init__(self):
        heal = np.asarray(self.heal, dtype=bool)
        mask = np.asarray(self.mask, dtype=bool)
        if heal.shape != mask.shape or heal.ndim != 2:
            raise MalformedMap("heal and mask must be 2-D bitmaps of equal shape")
        object.__setattr__(self, "heal", heal & ~mask)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def empty(cls, rows: int, cols: int, skew_mV: float = 0.0,
              source: MapSource = MapSource.STATIC, env: Environment = Environment()) -> StabilizationMap:
        zeros = np.zeros((rows, cols), dtype=bool)
        return cls(zeros, zeros.copy(), skew_mV, source, env)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def size(self) -> int:
        return self.mask.size

    @property
    def masking_ratio(self) -> float:
        return float(np.count_nonzero(self.mask)) / self.size

    @property
    def healing_ratio(self) -> float:
        return float(np.count_nonzero(self.heal)) / self.size

    @property
    def n_usable(self) -> int:
        return self.size - int(np.count_nonzero(self.mask))

    def __eq__(self, other):
        if not isinstance(other, StabilizationMap):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def to_bytes(self) -> bytes:
        rows, cols = self.shape
        header = _HEADER.pack(MAP_MAGIC, rows, cols, int(round(self.skew_mV * 1000.0)),
                              int(self.source), to_q16(self.env_at_check.vdd),
                              to_q16(self.env_at_check.temperature))
        return header + pack_bits_lsb(self.heal) + pack_bits_lsb(self.mask)

    @classmethod
    def from_bytes(cls, data: bytes) -> StabilizationMap:
        if len(data) < HEADER_SIZE:
            raise MalformedMap("map shorter than its header")
        magic, rows, cols, skew_uv, source, vdd, temp = _HEADER.unpack_from(data)
        if magic != MAP_MAGIC:
            raise MalformedMap("bad map magic")
        if rows < 1 or cols < 1:
            raise MalformedMap("empty map dimensions")
        n = rows * cols
        nbytes = (n + 7) // 8
        if len(data) != HEADER_SIZE + 2 * nbytes:
            raise MalformedMap(f"expected {HEADER_SIZE + 2 * nbytes} bytes, got {len(data)}")
        try:
            src = MapSource(source)
            env = Environment(from_q16(vdd), from_q16(temp))
        except ValueError as exc:
            raise MalformedMap(str(exc)) from None
        heal_raw = data[HEADER_SIZE:HEADER_SIZE + nbytes]
        mask_raw = data[HEADER_SIZE + nbytes:]
        if n % 8 and ((heal_raw[-1] | mask_raw[-1]) >> (n % 8)):
            raise MalformedMap("non-zero padding bits")
        heal = unpack_bits_lsb(heal_raw, n).reshape(rows, cols)
        mask = unpack_bits_lsb(mask_raw, n).reshape(rows, cols)
        if np.any(heal & mask):
            raise MalformedMap("cell flagged both healed and masked")
        return cls(heal, mask, skew_uv / 1000.0, src, env)


def encoded_size(rows: int, cols: int) -> int:
    return HEADER_SIZE + 2 * ((rows * cols + 7) // 8)
