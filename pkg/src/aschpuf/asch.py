"""Self-checking and healing state machines.

The first-stage supply V1 is driven by an 8-bit resistive DAC whose output
is dithered by 4-bit PWM, giving a 12-bit grid of ``fine_lsb`` steps. Before
skewing, V1 is locked onto V2: an 8-cycle successive-approximation search on
the coarse code, then a linear search of at most 16 fine codes. Each
comparison is a 5-vote majority of a noisy comparator.

Once locked, every row is evaluated for one session at ``-skew`` and one at
``+skew`` (2 cycles per row). A cell is dark when it toggles inside either
session or its majority differs between the two.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .cell import CellConfig, ChipModel, Environment, majority_counts, session_counts, static_margin
from .keygen import Key, generate_key, golden_plane, stabilize_readout
from .maps import MapSource, StabilizationMap


class TargetOutOfRange(ValueError):
    """V2 lies outside what the DAC can reach."""


@dataclass(frozen=True)
class DacModel:
    coarse_bits: int = 8
    fine_bits: int = 4
    fine_lsb_mV: float = 0.130
    center_mV: float = 615.0
    comparator_error: float = 0.05
    votes: int = 5

    @property
    def coarse_lsb_mV(self) -> float:
        return self.fine_lsb_mV * 2**self.fine_bits

    @property
    def n_codes(self) -> int:
        return 2 ** (self.coarse_bits + self.fine_bits)

    def v1(self, coarse: int, fine: int = 0) -> float:
        """DAC output for a (coarse, fine) code pair, in mV."""
        return self.level((coarse << self.fine_bits) + fine)

    def level(self, code: int) -> float:
        """DAC output for a combined 12-bit code."""
        return self.center_mV + (code - self.n_codes // 2) * self.fine_lsb_mV

    @property
    def span_mV(self) -> tuple[float, float]:
        return self.level(0), self.level(self.n_codes - 1)


class Comparator:
    """Auto-zero comparator with majority voting.

    Each vote is wrong with probability ``error`` while |a - b| is below one
    fine LSB; larger differences are always resolved correctly.
    """

    def __init__(self, dac: DacModel, rng: np.random.Generator | None = None, noiseless: bool = False):
        self.error = 0.0 if noiseless else dac.comparator_error
        self.threshold = dac.fine_lsb_mV
        self.votes = dac.votes
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def at_or_above(self, a: float, b: float) -> bool:
        truth = a >= b
        if self.error == 0 or abs(a - b) >= self.threshold:
            return truth
        wrong = int(np.count_nonzero(self.rng.random(self.votes) < self.error))
        agree = self.votes - wrong
        return truth if 2 * agree > self.votes else not truth


@dataclass(frozen=True)
class LockState:
    coarse_code: int
    fine_code: int
    residual_mV: float
    cycles_used: int


def _check_reachable(dac: DacModel, v2: float) -> None:
    lo, hi = dac.span_mV
    if not lo <= v2 <= hi:
        raise TargetOutOfRange(f"V2 = {v2:.3f} mV outside DAC span [{lo:.3f}, {hi:.3f}] mV")


def coarse_lock(dac: DacModel, v2_mV: float, comparator: Comparator) -> tuple[int, int]:
    """Binary search for the highest coarse code with V1 <= V2; always 8 cycles."""
    _check_reachable(dac, v2_mV)
    code = 0
    for bit in reversed(range(dac.coarse_bits)):
        trial = code | (1 << bit)
        # keep the bit unless V1 would exceed V2; an exact tie keeps it
        if comparator.at_or_above(v2_mV, dac.v1(trial)):
            code = trial
    return code, dac.coarse_bits


def fine_lock(dac: DacModel, coarse_code: int, v2_mV: float, comparator: Comparator) -> tuple[int, int]:
    """Step the PWM code up until V1 reaches V2; saturates at the top code."""
    top = 2**dac.fine_bits - 1
    for fine in range(top + 1):
        if comparator.at_or_above(dac.v1(coarse_code, fine), v2_mV):
            return fine, fine + 1
    return top, top + 1


def lock(dac: DacModel, v2_mV: float, comparator: Comparator) -> LockState:
    coarse, c_cycles = coarse_lock(dac, v2_mV, comparator)
    fine, f_cycles = fine_lock(dac, coarse, v2_mV, comparator)
    return LockState(coarse, fine, dac.v1(coarse, fine) - v2_mV, c_cycles + f_cycles)


@dataclass(frozen=True)
class TimingReport:
    lock_cycles: int
    skew_detect_cycles: int
    cycle_period_us: float = 20.0
    checks: int = 1

    @property
    def total_cycles(self) -> int:
        return self.lock_cycles + self.skew_detect_cycles

    @property
    def wall_time_us(self) -> float:
        return self.total_cycles * self.cycle_period_us

    def __add__(self, other: TimingReport) -> TimingReport:
        if self.cycle_period_us != other.cycle_period_us:
            raise ValueError("cannot combine timings with different cycle periods")
        return TimingReport(self.lock_cycles + other.lock_cycles,
                            self.skew_detect_cycles + other.skew_detect_cycles,
                            self.cycle_period_us, self.checks + other.checks)


class CheckResult(NamedTuple):
    dark: np.ndarray
    timing: TimingReport
    lock: LockState
    skews_mV: tuple[float, float]


@dataclass(frozen=True)
class CheckSettings:
    """Knobs shared by every self-check in a flow."""

    dac: DacModel = field(default_factory=DacModel)
    session_len: int = 64
    negative_first: bool = True
    noiseless_comparator: bool = False
    cycle_period_us: float = 20.0


DEFAULT_SETTINGS = CheckSettings()


def self_check(chip: ChipModel, config: CellConfig, env: Environment, skew_mV: float,
               rng: np.random.Generator, settings: CheckSettings = DEFAULT_SETTINGS) -> CheckResult:
    """Lock, then run the two skewed sessions over the whole array."""
    dac = settings.dac
    imbalance = chip.model.imbalance_range
    v2 = dac.center_mV + (rng.uniform(-imbalance, imbalance) if imbalance > 0 else 0.0)
    state = lock(dac, v2, Comparator(dac, rng, settings.noiseless_comparator))

    steps = int(round(abs(skew_mV) / dac.fine_lsb_mV))
    signs = (-1, 1) if settings.negative_first else (1, -1)
    n = settings.session_len
    majorities, flips, skews = {}, {}, {}
    for sign in signs:
        locked = (state.coarse_code << dac.fine_bits) + state.fine_code
        code = min(max(locked + sign * steps, 0), dac.n_codes - 1)
        effective = dac.level(code) - v2
        counts = session_counts(static_margin(chip, config, env, effective), chip.model.sigma_noise, n, rng)
        majorities[sign], flips[sign] = majority_counts(counts, n)
        skews[sign] = effective
    dark = flips[-1] | flips[1] | (majorities[-1] != majorities[1])
    timing = TimingReport(state.cycles_used, 2 * chip.rows, settings.cycle_period_us)
    return CheckResult(dark, timing, state, (skews[-1], skews[1]))


class FlowResult(NamedTuple):
    map: StabilizationMap
    key: Key
    timing: TimingReport
    dark_original: np.ndarray
    dark_healed: np.ndarray


def _check_and_heal(chip, env, skew_mV, rng, settings, source):
    first = self_check(chip, CellConfig.ORIGINAL, env, skew_mV, rng, settings)
    second = self_check(chip, CellConfig.HEALED, env, skew_mV, rng, settings)
    mask = first.dark & second.dark
    smap = StabilizationMap(first.dark & ~mask, mask, skew_mV, source, env)
    return smap, first.timing + second.timing, first.dark, second.dark


def run_s_asch(chip: ChipModel, env: Environment, skew_mV: float, rng: np.random.Generator,
               settings: CheckSettings = DEFAULT_SETTINGS, key_length: int | None = None,
               n_avg: int = 101) -> FlowResult:
    """Enrollment-time stabilization.

    The key is assembled from noise-averaged golden planes taken at ``env``.
    """
    smap, timing, d1, d2 = _check_and_heal(chip, env, skew_mV, rng, settings, MapSource.STATIC)
    orig = golden_plane(chip, CellConfig.ORIGINAL, env, rng, n_avg)
    healed = golden_plane(chip, CellConfig.HEALED, env, rng, n_avg)
    key = stabilize_readout(orig, healed, smap, key_length, provenance=f"s-asch:{chip.chip_id}")
    return FlowResult(smap, key, timing, d1, d2)


def run_d_asch_powerup(chip: ChipModel, env: Environment, skew_mV: float, rng: np.random.Generator,
                       settings: CheckSettings = DEFAULT_SETTINGS,
                       key_length: int | None = None) -> FlowResult:
    """In-field stabilization at power-up, followed by a single-shot key readout."""
    smap, timing, d1, d2 = _check_and_heal(chip, env, skew_mV, rng, settings, MapSource.DYNAMIC)
    key = generate_key(chip, smap, env, key_length, rng, provenance=f"d-asch:{chip.chip_id}")
    return FlowResult(smap, key, timing, d1, d2)


def asc_only(chip: ChipModel, env: Environment, skew_mV: float, rng: np.random.Generator,
             settings: CheckSettings = DEFAULT_SETTINGS) -> tuple[StabilizationMap, TimingReport]:
    """Mask every dark cell of a single check, no healing."""
    first = self_check(chip, CellConfig.ORIGINAL, env, skew_mV, rng, settings)
    smap = StabilizationMap(np.zeros_like(first.dark), first.dark, skew_mV, MapSource.STATIC, env)
    return smap, first.timing


def noiseless_settings(settings: CheckSettings = DEFAULT_SETTINGS) -> CheckSettings:
    return replace(settings, noiseless_comparator=True)


__all__ = [
    "TargetOutOfRange", "DacModel", "Comparator", "LockState", "coarse_lock", "fine_lock", "lock",
    "TimingReport", "CheckResult", "CheckSettings", "DEFAULT_SETTINGS", "self_check", "FlowResult",
    "run_s_asch", "run_d_asch_powerup", "asc_only", "noiseless_settings",
]
