"""Behavioral model of inverter-chain PUF cells and cell arrays.

Every cell exposes a decision margin in millivolts. The output bit is 1 when
the margin plus per-evaluation Gaussian noise is >= 0. The static part of the
margin is linear in temperature, supply voltage, applied skew and aging
drift::

    margin = dv + tc*(T - T_nom)/1000 + vc*(V - V_nom)/1000 + drift + skew

with ``dv``/``drift`` in mV, ``tc`` in uV/degC and ``vc`` in uV/V. Each cell
carries two independent parameter sets, one for the original four-stage
configuration and one for the healed three-stage configuration.

Arrays of cells are stored as struct-of-arrays (`ChipModel`) so whole-array
evaluations stay vectorized. Repeated evaluations of a cell are independent
given its margin, so ``n`` evaluations are drawn as a single binomial count
``Binomial(n, P(bit=1))``, which has exactly the distribution of counting
``n`` separate noisy evaluations.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from ._rng import derive_rng

__all__ = [
    "ConfigError",
    "Environment",
    "NOMINAL",
    "ModelConfig",
    "CellConfig",
    "CellModel",
    "ChipModel",
    "sample_chip",
    "margin",
    "static_margin",
    "prob_one",
    "evaluate_bit",
    "evaluate_session",
    "session_counts",
    "majority_counts",
    "aging_acceleration",
    "apply_aging",
    "ground_truth_unstable",
    "load_config",
    "parse_config",
    "dump_config",
    "save_chip",
    "load_chip",
    "chip_to_bytes",
    "chip_from_bytes",
]


class ConfigError(ValueError):
    """Raised for malformed or out-of-range model configuration."""


@dataclass(frozen=True)
class Environment:
    """Operating point: supply voltage in volts, temperature in degC."""

    vdd: float = 1.2
    temperature: float = 25.0

    def __post_init__(self):
        if not 0.5 <= self.vdd <= 1.6:
            raise ConfigError(f"vdd {self.vdd} V outside [0.5, 1.6]")
        if not -55.0 <= self.temperature <= 150.0:
            raise ConfigError(f"temperature {self.temperature} degC outside [-55, 150]")


NOMINAL = Environment(1.2, 25.0)


@dataclass(frozen=True)
class ModelConfig:
    """Statistical parameters of the cell population.

    The defaults are the shipped silicon calibration (see `silicon`).
    """

    sigma_process: float = 20.0  # mV, static mismatch
    sigma_noise: float = 0.1822  # mV, per evaluation
    sigma_tempco: float = 46.2  # uV/degC
    sigma_voltco: float = 678.6  # uV/V, residual after regulation
    heal_correlation: float = 0.0
    heal_bias: float = 0.0  # mV, mean offset of the healed mismatch
    nominal_env: Environment = NOMINAL
    imbalance_range: float = 30.0  # mV
    sigma_age: float = 0.00686  # mV / sqrt(hour) at nominal stress
    age_temp_coeff: float = 0.04  # 1/degC
    age_vdd_coeff: float = 2.0  # 1/V
    seed: int = 20231

    def __post_init__(self):
        for name in ("sigma_process", "sigma_noise", "sigma_tempco", "sigma_voltco", "sigma_age"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if abs(self.heal_correlation) > 1:
            raise ConfigError("heal_correlation must lie in [-1, 1]")
        if self.imbalance_range < 0:
            raise ConfigError("imbalance_range must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @classmethod
    def silicon(cls, **overrides) -> ModelConfig:
        """Population calibrated against the measured chip statistics."""
        return cls(**overrides)

    @classmethod
    def spice(cls, **overrides) -> ModelConfig:
        """Noise-dominated population matching the circuit-simulation study.

        About 1.8% of cells flip somewhere in -40..125 degC and a 6 mV skew
        flags every one of them at roughly two-thirds accuracy.
        """
        params = dict(
            sigma_process=250.0,
            sigma_noise=1.5,
            sigma_tempco=10.0,
            sigma_voltco=200.0,
        )
        params.update(overrides)
        return cls(**params)

    def noiseless(self) -> ModelConfig:
        return replace(self, sigma_noise=0.0)


class CellConfig(enum.IntEnum):
    ORIGINAL = 0
    HEALED = 1


@dataclass(frozen=True)
class CellModel:
    """Static parameters of one cell, both configurations."""

    dv_orig: float = 0.0
    dv_heal: float = 0.0
    tc_orig: float = 0.0
    tc_heal: float = 0.0
    vc_orig: float = 0.0
    vc_heal: float = 0.0
    drift_orig: float = 0.0
    drift_heal: float = 0.0

    def params(self, config: CellConfig) -> tuple[float, float, float, float]:
        if config == CellConfig.ORIGINAL:
            return self.dv_orig, self.tc_orig, self.vc_orig, self.drift_orig
        return self.dv_heal, self.tc_heal, self.vc_heal, self.drift_heal

    def negated(self) -> CellModel:
        return CellModel(*(-getattr(self, f.name) for f in fields(self)))


def margin(cell: CellModel, config: CellConfig, env: Environment, skew_mV: float = 0.0,
           noise_sample_mV: float = 0.0, nominal: Environment = NOMINAL) -> float:
    """Decision margin of a single cell in mV."""
    dv, tc, vc, drift = cell.params(config)
    return (dv
            + tc * (env.temperature - nominal.temperature) / 1000.0
            + vc * (env.vdd - nominal.vdd) / 1000.0
            + drift + skew_mV + noise_sample_mV)


def evaluate_bit(cell: CellModel, config: CellConfig, env: Environment, skew_mV: float,
                 rng: np.random.Generator, sigma_noise: float,
                 nominal: Environment = NOMINAL) -> int:
    """One noisy readout. A margin of exactly zero reads as 1."""
    noise = rng.normal(0.0, sigma_noise) if sigma_noise > 0 else 0.0
    return int(margin(cell, config, env, skew_mV, noise, nominal) >= 0)


def evaluate_session(cell: CellModel, config: CellConfig, env: Environment, skew_mV: float,
                     n_evals: int, rng: np.random.Generator, sigma_noise: float,
                     nominal: Environment = NOMINAL) -> tuple[int, bool]:
    """Evaluate ``n_evals`` times; return (majority bit, any transition seen).

    Majority ties resolve to 1.
    """
    if n_evals < 1:
        raise ValueError("n_evals must be >= 1")
    base = margin(cell, config, env, skew_mV, 0.0, nominal)
    noise = rng.normal(0.0, sigma_noise, n_evals) if sigma_noise > 0 else np.zeros(n_evals)
    ones = int(np.count_nonzero(base + noise >= 0))
    return int(2 * ones >= n_evals), 0 < ones < n_evals


@dataclass(frozen=True, eq=False)
class ChipModel:
    """A sampled array of cells.

    Parameter arrays have shape ``(2, rows, cols)``; the leading axis is
    indexed by `CellConfig`.
    """

    chip_id: str
    rows: int
    cols: int
    model: ModelConfig
    dv: np.ndarray
    tc: np.ndarray
    vc: np.ndarray
    drift: np.ndarray
    aged_hours: float = field(default=0.0)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def cell(self, row: int, col: int) -> CellModel:
        return CellModel(
            float(self.dv[0, row, col]), float(self.dv[1, row, col]),
            float(self.tc[0, row, col]), float(self.tc[1, row, col]),
            float(self.vc[0, row, col]), float(self.vc[1, row, col]),
            float(self.drift[0, row, col]), float(self.drift[1, row, col]),
        )

    def same_cells(self, other: ChipModel) -> bool:
        return (self.shape == other.shape
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("dv", "tc", "vc", "drift")))


def sample_chip(cfg: ModelConfig, chip_id, rows: int = 32, cols: int = 128) -> ChipModel:
    """Draw a chip deterministically from ``(cfg.seed, chip_id)``."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    rng = derive_rng(cfg.seed, "chip", str(chip_id))
    shape = (rows, cols)
    z1 = rng.standard_normal(shape)
    z2 = rng.standard_normal(shape)
    rho = cfg.heal_correlation
    dv = np.stack([
        cfg.sigma_process * z1,
        cfg.sigma_process * (rho * z1 + np.sqrt(1.0 - rho * rho) * z2) + cfg.heal_bias,
    ])
    tc = cfg.sigma_tempco * rng.standard_normal((2, *shape))
    vc = cfg.sigma_voltco * rng.standard_normal((2, *shape))
    drift = np.zeros((2, *shape))
    return ChipModel(str(chip_id), rows, cols, cfg, dv, tc, vc, drift)


def static_margin(chip: ChipModel, config: CellConfig, env: Environment,
                  skew_mV: float | np.ndarray = 0.0) -> np.ndarray:
    """Noise-free margins of every cell, shape ``(rows, cols)``."""
    nominal = chip.model.nominal_env
    c = int(config)
    return (chip.dv[c]
            + chip.tc[c] * ((env.temperature - nominal.temperature) / 1000.0)
            + chip.vc[c] * ((env.vdd - nominal.vdd) / 1000.0)
            + chip.drift[c] + skew_mV)


def prob_one(margins: np.ndarray, sigma_noise: float) -> np.ndarray:
    """Probability that a noisy evaluation reads 1."""
    margins = np.asarray(margins, dtype=float)
    if sigma_noise == 0:
        return (margins >= 0).astype(float)
    return ndtr(margins / sigma_noise)


def session_counts(margins: np.ndarray, sigma_noise: float, n_evals: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Number of 1 readouts in ``n_evals`` evaluations of every cell."""
    if n_evals < 1:
        raise ValueError("n_evals must be >= 1")
    return rng.binomial(n_evals, prob_one(margins, sigma_noise))


def majority_counts(counts: np.ndarray, n_evals: int) -> tuple[np.ndarray, np.ndarray]:
    """(majority bit, flipped) from per-cell one-counts; ties read as 1."""
    counts = np.asarray(counts)
    return 2 * counts >= n_evals, (counts > 0) & (counts < n_evals)


def aging_acceleration(cfg: ModelConfig, stress_env: Environment) -> float:
    nominal = cfg.nominal_env
    return float(np.exp(cfg.age_temp_coeff * (stress_env.temperature - nominal.temperature)
                        + cfg.age_vdd_coeff * (stress_env.vdd - nominal.vdd)))


def apply_aging(chip: ChipModel, hours: float, stress_env: Environment,
                rng: np.random.Generator) -> ChipModel:
    """Return a copy of ``chip`` after ``hours`` of stress at ``stress_env``.

    Drift follows a zero-mean Gaussian random walk whose variance grows with
    ``sigma_age**2 * hours * acceleration``.
    """
    if hours < 0:
        raise ValueError("hours must be >= 0")
    if hours == 0:
        return chip
    cfg = chip.model
    scale = cfg.sigma_age * np.sqrt(hours * aging_acceleration(cfg, stress_env))
    drift = chip.drift + scale * rng.standard_normal(chip.drift.shape)
    return replace(chip, drift=drift, aged_hours=chip.aged_hours + hours)


def ground_truth_unstable(chip: ChipModel, config: CellConfig, env_grid, rng: np.random.Generator,
                          skew_mV: float = 0.0, n_evals: int = 1000,
                          golden: np.ndarray | None = None, n_avg: int = 101) -> np.ndarray:
    """Brute-force instability oracle.

    Marks every cell that reads differently from its nominal golden value in
    any of ``n_evals`` evaluations at any grid point. ``golden`` defaults to a
    fresh ``n_avg``-sample majority at the nominal condition.
    """
    env_grid = list(env_grid)
    if not env_grid:
        raise ValueError("env_grid must be non-empty")
    sigma = chip.model.sigma_noise
    if golden is None:
        counts = session_counts(static_margin(chip, config, chip.model.nominal_env), sigma, n_avg, rng)
        golden = 2 * counts >= n_avg
    golden = np.asarray(golden, dtype=bool)
    unstable = np.zeros(chip.shape, dtype=bool)
    for env in env_grid:
        ones = session_counts(static_margin(chip, config, env, skew_mV), sigma, n_evals, rng)
        unstable |= np.where(golden, ones < n_evals, ones > 0)
    return unstable


# -- configuration files -------------------------------------------------------

_ENV_KEYS = ("nominal_vdd", "nominal_temperature")


def parse_config(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    base = base or ModelConfig()
    known = {f.name: f for f in fields(ModelConfig) if f.name != "nominal_env"}
    values: dict = {}
    env = {"nominal_vdd": base.nominal_env.vdd, "nominal_temperature": base.nominal_env.temperature}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        try:
            if key in _ENV_KEYS:
                env[key] = float(value)
            elif key == "seed":
                values[key] = int(value, 0)
            elif key in known:
                values[key] = float(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    values["nominal_env"] = Environment(env["nominal_vdd"], env["nominal_temperature"])
    return replace(base, **values)


def load_config(path) -> ModelConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(cfg):
        if f.name == "nominal_env":
            lines.append(f"nominal_vdd = {cfg.nominal_env.vdd!r}")
            lines.append(f"nominal_temperature = {cfg.nominal_env.temperature!r}")
        else:
            lines.append(f"{f.name} = {getattr(cfg, f.name)!r}")
    return "\n".join(lines) + "\n"


# -- binary snapshots ------------------------------------------------------------

CHIP_MAGIC = b"ASCHPUF1"
CHIP_VERSION = 1
_CFG_FLOATS = ("sigma_process", "sigma_noise", "sigma_tempco", "sigma_voltco", "heal_correlation",
               "heal_bias", "imbalance_range", "sigma_age", "age_temp_coeff", "age_vdd_coeff")
_ARRAYS = ("dv", "tc", "vc", "drift")


def chip_to_bytes(chip: ChipModel) -> bytes:
    cfg = chip.model
    ident = chip.chip_id.encode()
    out = io.BytesIO()
    out.write(CHIP_MAGIC)
    out.write(struct.pack("<HIIQH", CHIP_VERSION, chip.rows, chip.cols, cfg.seed, len(ident)))
    out.write(ident)
    out.write(struct.pack(f"<{len(_CFG_FLOATS) + 3}d",
                          *(getattr(cfg, n) for n in _CFG_FLOATS),
                          cfg.nominal_env.vdd, cfg.nominal_env.temperature, chip.aged_hours))
    for name in _ARRAYS:
        out.write(np.ascontiguousarray(getattr(chip, name), dtype="<f8").tobytes())
    return out.getvalue()


def chip_from_bytes(data: bytes) -> ChipModel:
    if data[:8] != CHIP_MAGIC:
        raise ValueError("not an ASCHPUF1 snapshot")
    try:
        version, rows, cols, seed, id_len = struct.unpack_from("<HIIQH", data, 8)
    except struct.error:
        raise ValueError("truncated snapshot") from None
    if version != CHIP_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    pos = 8 + struct.calcsize("<HIIQH")
    chip_id = data[pos:pos + id_len].decode()
    pos += id_len
    n_float = len(_CFG_FLOATS) + 3
    try:
        floats = struct.unpack_from(f"<{n_float}d", data, pos)
    except struct.error:
        raise ValueError("truncated snapshot") from None
    pos += 8 * n_float
    cfg = ModelConfig(**dict(zip(_CFG_FLOATS, floats)),
                      nominal_env=Environment(floats[-3], floats[-2]), seed=seed)
    count = 2 * rows * cols
    arrays = {}
    for name in _ARRAYS:
        chunk = data[pos:pos + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError("truncated snapshot")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(2, rows, cols).astype(float)
        pos += 8 * count
    if pos != len(data):
        raise ValueError("trailing bytes after snapshot")
    return ChipModel(chip_id, rows, cols, cfg, aged_hours=floats[-1], **arrays)


def save_chip(chip: ChipModel, path) -> None:
    Path(path).write_bytes(chip_to_bytes(chip))


def load_chip(path) -> ChipModel:
    return chip_from_bytes(Path(path).read_bytes())
