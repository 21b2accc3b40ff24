"""Array readout and output stabilization.

Keys are built by scanning cells in row-major order: masked cells are
skipped, healed cells contribute their healed-configuration value and all
other cells their original value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cell import CellConfig, ChipModel, Environment, prob_one, session_counts, static_margin
from .maps import StabilizationMap


class KeyTooLong(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BitPlane:
    """One readout of the whole array in a fixed configuration."""

    bits: np.ndarray
    config: CellConfig
    env: Environment
    n_avg: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, BitPlane):
            return NotImplemented
        return (self.config == other.config and self.env == other.env
                and self.n_avg == other.n_avg and np.array_equal(self.bits, other.bits))

    def hex(self) -> str:
        return bits_to_hex(self.bits)


@dataclass(frozen=True, eq=False)
class Key:
    bits: np.ndarray
    provenance: str = ""

    @property
    def length(self) -> int:
        return int(self.bits.size)

    def __len__(self):
        return self.length

    def __eq__(self, other):
        if not isinstance(other, Key):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def hex(self) -> str:
        return bits_to_hex(self.bits)

    def to_bytes(self) -> bytes:
        return bits_to_bytes(self.bits)

    @classmethod
    def from_hex(cls, text: str, length: int, provenance: str = "") -> Key:
        return cls(bits_from_bytes(bytes.fromhex(text), length), provenance)


def bits_to_bytes(bits) -> bytes:
    """Pack bits MSB-first within each byte; the last byte is zero padded."""
    return np.packbits(np.asarray(bits, dtype=bool).ravel()).tobytes()


def bits_from_bytes(data: bytes, length: int) -> np.ndarray:
    if len(data) * 8 < length:
        raise ValueError("not enough bytes for requested bit count")
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=length).astype(bool)


def bits_to_hex(bits) -> str:
    return bits_to_bytes(bits).hex()


def golden_plane(chip: ChipModel, config: CellConfig, env: Environment, rng: np.random.Generator,
                 n_avg: int = 101) -> BitPlane:
    """Majority of ``n_avg`` zero-skew evaluations per cell."""
    if n_avg < 1 or n_avg % 2 == 0:
        raise ValueError("n_avg must be a positive odd number")
    counts = session_counts(static_margin(chip, config, env), chip.model.sigma_noise, n_avg, rng)
    return BitPlane(2 * counts > n_avg, config, env, n_avg)


def key_positions(smap: StabilizationMap, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Flat cell indices feeding each key position, and whether each is healed."""
    usable = np.flatnonzero(~smap.mask.ravel())
    if length is None:
        length = usable.size
    if length < 0 or length > usable.size:
        raise KeyTooLong(f"requested {length} bits but only {usable.size} cells are unmasked")
    cells = usable[:length]
    return cells, smap.heal.ravel()[cells]


def _plane_bits(plane) -> np.ndarray:
    return plane.bits if isinstance(plane, BitPlane) else np.asarray(plane, dtype=bool)


def stabilize_readout(orig_bits, healed_bits, smap: StabilizationMap, length: int | None = None,
                      provenance: str = "") -> Key:
    """Assemble a key of ``length`` bits (default: every unmasked cell)."""
    orig = _plane_bits(orig_bits)
    healed = _plane_bits(healed_bits)
    if orig.shape != smap.shape or healed.shape != smap.shape:
        raise DimensionMismatch(f"planes {orig.shape}/{healed.shape} vs map {smap.shape}")
    cells, use_heal = key_positions(smap, length)
    bits = np.where(use_heal, healed.ravel()[cells], orig.ravel()[cells])
    return Key(bits.astype(bool), provenance)


def key_margins(chip: ChipModel, smap: StabilizationMap, env: Environment,
                length: int | None = None) -> np.ndarray:
    """Noise-free margins of the cells feeding each key position."""
    cells, use_heal = key_positions(smap, length)
    orig = static_margin(chip, CellConfig.ORIGINAL, env).ravel()[cells]
    healed = static_margin(chip, CellConfig.HEALED, env).ravel()[cells]
    return np.where(use_heal, healed, orig)


def generate_key(chip: ChipModel, smap: StabilizationMap, env: Environment, length: int | None,
                 rng: np.random.Generator, provenance: str = "") -> Key:
    """Single-shot readout of the cells the map selects, at ``env``."""
    if smap.shape != chip.shape:
        raise DimensionMismatch(f"map {smap.shape} vs chip {chip.shape}")
    p = prob_one(key_margins(chip, smap, env, length), chip.model.sigma_noise)
    return Key(rng.random(p.shape) < p, provenance)


def key_error_counts(chip: ChipModel, smap: StabilizationMap, reference: Key, env: Environment,
                     n_evals: int, rng: np.random.Generator) -> np.ndarray:
    """Per key position, how many of ``n_evals`` regenerations disagree with ``reference``."""
    p = prob_one(key_margins(chip, smap, env, reference.length), chip.model.sigma_noise)
    p_err = np.where(reference.bits, 1.0 - p, p)
    return rng.binomial(n_evals, p_err)
