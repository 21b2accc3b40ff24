"""Desk-scale reproductions of the stability, masking and aging experiments.

Every function here is deterministic in its ``seed`` argument: random
streams are derived from ``(seed, purpose, chip, ...)`` so results do not
depend on evaluation order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._rng import derive_rng
from .asch import DEFAULT_SETTINGS, CheckSettings, asc_only, run_d_asch_powerup, run_s_asch
from .cell import (
    CellConfig,
    ChipModel,
    Environment,
    ModelConfig,
    apply_aging,
    prob_one,
    sample_chip,
    static_margin,
)
from .keygen import BitPlane, Key, golden_plane, key_error_counts, stabilize_readout
from .maps import StabilizationMap
from .metrics import BerReport, ber_from_counts, combine_reports, pessimistic_ber

TEMP_GRID = (-45.0, -20.0, 0.0, 25.0, 50.0, 75.0, 100.0, 125.0)
VDD_GRID = (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4)
WORST_CORNER = Environment(0.7, 125.0)
STRESS_ENV = Environment(1.4, 150.0)
AGING_HOURS = (0.0, 6.0, 12.0, 18.0, 24.0, 48.0, 72.0, 96.0)

MODES = ("asc", "s-asch", "d-asch")


def worker_count() -> int:
    """Thread budget from ``ASCHPUF_THREADS`` (default 1)."""
    raw = os.environ.get("ASCHPUF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def pmap(fn, items) -> list:
    """Ordered map over ``items`` using up to ``worker_count()`` threads.

    Every work unit derives its own random stream, so the result does not
    depend on scheduling.
    """
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def temperature_sweep(temps=TEMP_GRID, vdd: float = 1.2) -> list[Environment]:
    return [Environment(vdd, t) for t in temps]


def voltage_sweep(vdds=VDD_GRID, temperature: float = 25.0) -> list[Environment]:
    return [Environment(v, temperature) for v in vdds]


def full_grid(temps=TEMP_GRID, vdds=(0.7, 1.2, 1.4)) -> list[Environment]:
    return [Environment(v, t) for t in temps for v in vdds]


def default_skews(stop: float = 30.0, step: float = 0.26) -> np.ndarray:
    """Ascending skew candidates on a 2-fine-LSB grid."""
    return np.round(np.arange(0.0, stop + 1e-9, step), 6)


def make_chips(cfg: ModelConfig, n_chips: int, rows: int = 32, cols: int = 128) -> list[ChipModel]:
    return [sample_chip(cfg, f"chip{i:03d}", rows, cols) for i in range(n_chips)]


@dataclass
class Golden:
    """Enrollment-time golden planes of one chip."""

    orig: BitPlane
    healed: BitPlane

    def key(self, smap: StabilizationMap, length: int | None = None) -> Key:
        return stabilize_readout(self.orig, self.healed, smap, length)


def enroll_golden(chip: ChipModel, seed: int, env: Environment | None = None, n_avg: int = 101,
                  tag: str = "golden") -> Golden:
    env = env or chip.model.nominal_env
    rng = derive_rng(seed, tag, chip.chip_id, chip.aged_hours)
    return Golden(golden_plane(chip, CellConfig.ORIGINAL, env, rng, n_avg),
                  golden_plane(chip, CellConfig.HEALED, env, rng, n_avg))


# -- raw stability ------------------------------------------------------------------

def raw_error_counts(chip: ChipModel, golden: np.ndarray, env: Environment, n_evals: int,
                     rng: np.random.Generator, config: CellConfig = CellConfig.ORIGINAL) -> np.ndarray:
    p = prob_one(static_margin(chip, config, env), chip.model.sigma_noise)
    return rng.binomial(n_evals, np.where(golden, 1.0 - p, p))


def raw_ber(chips: Sequence[ChipModel], goldens: Sequence[Golden], envs: Sequence[Environment],
            n_evals: int, seed: int, tag: str = "raw") -> BerReport:
    """Unstabilized BER pooled over chips and environments.

    Each environment contributes ``n_evals`` evaluations per bit, so the
    report counts ``n_evals * len(envs)`` evaluations per bit.
    """
    def one(pair):
        chip, gold = pair
        total = np.zeros(chip.shape, dtype=np.int64)
        for i, env in enumerate(envs):
            rng = derive_rng(seed, tag, chip.chip_id, i)
            total += raw_error_counts(chip, gold.orig.bits, env, n_evals, rng)
        return ber_from_counts(total, n_evals * len(envs))

    return combine_reports(pmap(one, zip(chips, goldens)))


# -- stabilized stability -----------------------------------------------------------

def build_map(mode: str, chip: ChipModel, env: Environment, skew_mV: float, rng: np.random.Generator,
              settings: CheckSettings = DEFAULT_SETTINGS) -> StabilizationMap:
    if mode == "asc":
        return asc_only(chip, env, skew_mV, rng, settings)[0]
    if mode == "s-asch":
        return run_s_asch(chip, env, skew_mV, rng, settings).map
    if mode == "d-asch":
        return run_d_asch_powerup(chip, env, skew_mV, rng, settings).map
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class StabilizedResult:
    skew_mV: float
    report: BerReport
    maps: dict = field(default_factory=dict)

    @property
    def masking_ratio(self) -> float:
        return self.report.masking_ratio

    @property
    def zero_ber(self) -> bool:
        return self.report.n_errors == 0


def stabilized_ber(mode: str, chips: Sequence[ChipModel], goldens: Sequence[Golden],
                   envs: Sequence[Environment], skew_mV: float, n_evals: int, seed: int,
                   enroll_env: Environment | None = None, enroll_chips: Sequence[ChipModel] | None = None,
                   settings: CheckSettings = DEFAULT_SETTINGS) -> StabilizedResult:
    """Key-bit errors of a stabilization mode, pooled over chips and ``envs``.

    ``asc`` and ``s-asch`` build one map per chip at ``enroll_env`` (default
    nominal) on ``enroll_chips`` (default ``chips``); ``d-asch`` builds a fresh
    map at every environment. The reported masking ratio is the mean over
    the maps used.
    """
    enroll_chips = enroll_chips or chips

    def one(args):
        chip, enrolled, gold = args
        maps = {}
        total = np.zeros(chip.size, dtype=np.int64)
        masked = np.zeros(chip.size, dtype=np.int64)
        static_map = None
        if mode != "d-asch":
            env0 = enroll_env or chip.model.nominal_env
            static_map = build_map(mode, enrolled, env0, skew_mV,
                                   derive_rng(seed, "map", mode, chip.chip_id, skew_mV), settings)
            maps[chip.chip_id] = static_map
        for i, env in enumerate(envs):
            if static_map is None:
                smap = build_map(mode, chip, env, skew_mV,
                                 derive_rng(seed, "map", mode, chip.chip_id, skew_mV, i), settings)
                maps[(chip.chip_id, i)] = smap
            else:
                smap = static_map
            ref = gold.key(smap)
            rng = derive_rng(seed, "keyeval", mode, chip.chip_id, skew_mV, i)
            counts = key_error_counts(chip, smap, ref, env, n_evals, rng)
            usable = np.flatnonzero(~smap.mask.ravel())
            total[usable] += counts
            masked += smap.mask.ravel()
        # a cell counts as masked in the pooled report when it was masked in every env
        mask = masked == len(envs)
        n_total = n_evals * len(envs)
        rep = ber_from_counts(total, n_total, mask)
        if mode == "d-asch":
            ratio = masked.sum() / (chip.size * len(envs))
            rep = _with_ratio(rep, ratio, total, n_total)
        return rep, maps

    results = pmap(one, zip(chips, enroll_chips, goldens))
    maps = {}
    for _, m in results:
        maps.update(m)
    return StabilizedResult(skew_mV, combine_reports([r for r, _ in results]), maps)


def _with_ratio(rep: BerReport, ratio: float, total: np.ndarray, n_total: int) -> BerReport:
    """Re-express a per-env-map report with the average masking ratio."""
    n_unmasked = rep.n_bits - int(round(ratio * rep.n_bits))
    pes = pessimistic_ber(rep.n_bits, ratio, n_total) if rep.n_errors == 0 else None
    return BerReport(rep.n_bits, n_total, rep.n_errors, ratio, rep.n_errors / (n_unmasked * n_total), pes,
                     rep.unstable_fraction, n_unmasked)


@dataclass
class ZeroBerSearch:
    mode: str
    skew_mV: float | None
    result: StabilizedResult | None
    trace: list = field(default_factory=list)

    @property
    def found(self) -> bool:
        return self.result is not None

    @property
    def masking_ratio(self) -> float:
        return self.result.masking_ratio if self.result else math.nan


def find_zero_ber_skew(mode: str, chips, goldens, envs, n_evals: int, seed: int, skews=None,
                       coarse: int = 4, **kwargs) -> ZeroBerSearch:
    """Smallest skew whose stabilized keys show no error over ``envs``.

    Candidates are scanned every ``coarse``-th entry first; once an error-free
    candidate is found the skipped candidates below it are scanned in order.
    """
    skews = [float(s) for s in (default_skews() if skews is None else skews)]
    trace = []

    def attempt(i):
        res = stabilized_ber(mode, chips, goldens, envs, skews[i], n_evals, seed, **kwargs)
        trace.append((skews[i], res.masking_ratio, res.report.n_errors))
        return res

    coarse = max(1, coarse)
    prev = -1
    for i in list(range(0, len(skews), coarse)) + [len(skews) - 1]:
        if i <= prev:
            continue
        res = attempt(i)
        if res.zero_ber:
            for j in range(prev + 1, i):
                fine = attempt(j)
                if fine.zero_ber:
                    return ZeroBerSearch(mode, fine.skew_mV, fine, trace)
            return ZeroBerSearch(mode, res.skew_mV, res, trace)
        prev = i
    return ZeroBerSearch(mode, None, None, trace)


def joint_zero_ber_skew(modes, chips, goldens, envs, n_evals: int, seed: int, skews=None,
                        **kwargs) -> dict[str, ZeroBerSearch]:
    """Smallest candidate skew at which every flow in ``modes`` shows no error.

    Returns one `ZeroBerSearch` per mode, all evaluated at the shared skew
    (``skew_mV`` is None when no candidate works for every mode).
    """
    skews = [float(s) for s in (default_skews() if skews is None else skews)]
    singles = [find_zero_ber_skew(m, chips, goldens, envs, n_evals, seed, skews, **kwargs) for m in modes]
    if not all(s.found for s in singles):
        return {m: ZeroBerSearch(m, None, None, s.trace) for m, s in zip(modes, singles)}
    start = skews.index(max(s.skew_mV for s in singles))
    for skew in skews[start:]:
        results = {m: stabilized_ber(m, chips, goldens, envs, skew, n_evals, seed, **kwargs) for m in modes}
        if all(r.zero_ber for r in results.values()):
            return {m: ZeroBerSearch(m, skew, r, s.trace) for (m, r), s in zip(results.items(), singles)}
    return {m: ZeroBerSearch(m, None, None, s.trace) for m, s in zip(modes, singles)}


# -- calibration ----------------------------------------------------------------------

@dataclass(frozen=True)
class Target:
    name: str
    value: float
    target: float
    low: float
    high: float

    @property
    def ok(self) -> bool:
        return self.low <= self.value <= self.high


def calibration_report(cfg: ModelConfig, n_chips: int = 10, n_evals: int = 2000, seed: int | None = None,
                       temps=TEMP_GRID, vdds=VDD_GRID, rows: int = 32, cols: int = 128) -> list[Target]:
    """Raw-stability statistics of ``cfg`` against the measured targets."""
    seed = cfg.seed if seed is None else seed
    chips = make_chips(cfg, n_chips, rows, cols)
    goldens = [enroll_golden(c, seed) for c in chips]
    nominal = raw_ber(chips, goldens, [cfg.nominal_env], n_evals, seed, "nominal")
    temp = raw_ber(chips, goldens, temperature_sweep(temps, cfg.nominal_env.vdd), n_evals, seed, "temp")
    volt = raw_ber(chips, goldens, voltage_sweep(vdds, cfg.nominal_env.temperature), n_evals, seed, "volt")
    return [
        Target("nominal_ber", nominal.ber, 2.9e-3, 1.5e-3, 6e-3),
        Target("nominal_unstable_fraction", nominal.unstable_fraction, 0.032, 0.02, 0.05),
        Target("temperature_ber", temp.ber, 4.2e-2, 2e-2, 8e-2),
        Target("voltage_ber", volt.ber, 4e-3, 1e-3, 1e-2),
    ]


def analytic_raw_ber(sigma_process: float, sigma_noise: float, shifts_mV) -> float:
    """Expected BER when a Gaussian shift of std ``shift`` is added at each point.

    For margin ``dv ~ N(0, sp^2)`` and independent ``X ~ N(0, s^2)``, the
    probability that ``dv + X`` and ``dv`` differ in sign is ``atan(s/sp)/pi``.
    """
    shifts = np.asarray(shifts_mV, dtype=float)
    s = np.sqrt(sigma_noise**2 + shifts**2)
    return float(np.mean(np.arctan(s / sigma_process) / np.pi))


def fit_noise(sigma_process: float, target_ber: float = 2.9e-3) -> float:
    return sigma_process * math.tan(math.pi * target_ber)


def _bisect(f: Callable[[float], float], lo: float, hi: float, iters: int = 80) -> float:
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def fit_tempco(sigma_process: float, sigma_noise: float, target_ber: float, temps=TEMP_GRID,
               nominal_t: float = 25.0) -> float:
    dts = np.asarray(temps) - nominal_t
    return _bisect(lambda x: analytic_raw_ber(sigma_process, sigma_noise, x * dts / 1000) - target_ber,
                   0.0, 100 * sigma_process)


def fit_voltco(sigma_process: float, sigma_noise: float, target_ber: float = 4e-3, vdds=VDD_GRID,
               nominal_v: float = 1.2) -> float:
    dvs = np.asarray(vdds) - nominal_v
    return _bisect(lambda x: analytic_raw_ber(sigma_process, sigma_noise, x * dvs / 1000) - target_ber,
                   0.0, 1e5 * sigma_process)


# -- sweeps ------------------------------------------------------------------------------

def sweep_skew_chips(chips: Sequence[ChipModel], skews, n_evals: int, seed: int,
                     env: Environment = WORST_CORNER, modes=("asc", "s-asch")) -> list[dict]:
    """One row per (skew, mode): masking ratio and key-bit BER at ``env``."""
    goldens = [enroll_golden(c, seed) for c in chips]
    rows = []
    for skew in skews:
        for mode in modes:
            res = stabilized_ber(mode, chips, goldens, [env], float(skew), n_evals, seed)
            rows.append(_row(mode, float(skew), env, res.report))
    return rows


def sweep_env_chips(chips: Sequence[ChipModel], skews, n_evals: int, seed: int,
                    temps=TEMP_GRID, vdds=VDD_GRID, modes=("s-asch", "d-asch")) -> list[dict]:
    """Raw and stabilized BER along a temperature sweep and a supply sweep."""
    nominal = chips[0].model.nominal_env
    goldens = [enroll_golden(c, seed) for c in chips]
    sweeps = {"temperature": temperature_sweep(temps, nominal.vdd),
              "voltage": voltage_sweep(vdds, nominal.temperature)}
    rows = []
    for sweep, envs in sweeps.items():
        for env in envs:
            rows.append(dict(sweep=sweep, **_row("raw", 0.0, env, raw_ber(chips, goldens, [env], n_evals, seed))))
        for mode in modes:
            for skew in skews:
                for env in envs:
                    res = stabilized_ber(mode, chips, goldens, [env], float(skew), n_evals, seed)
                    rows.append(dict(sweep=sweep, **_row(mode, float(skew), env, res.report)))
    return rows


def sweep_skew(cfg: ModelConfig, skews, n_chips: int, n_evals: int, seed: int,
               env: Environment = WORST_CORNER, modes=("asc", "s-asch")) -> list[dict]:
    return sweep_skew_chips(make_chips(cfg, n_chips), skews, n_evals, seed, env, modes)


def sweep_env(cfg: ModelConfig, skews, n_chips: int, n_evals: int, seed: int,
              temps=TEMP_GRID, vdds=VDD_GRID, modes=("s-asch", "d-asch")) -> list[dict]:
    return sweep_env_chips(make_chips(cfg, n_chips), skews, n_evals, seed, temps, vdds, modes)


def _row(mode: str, skew: float, env: Environment, rep: BerReport) -> dict:
    return dict(mode=mode, skew_mV=skew, vdd=env.vdd, temperature=env.temperature,
                masking_ratio=rep.masking_ratio, n_errors=rep.n_errors, n_evals=rep.n_evals,
                ber=rep.ber, pessimistic_ber=rep.pessimistic_ber)


# -- aging ---------------------------------------------------------------------------------

def age_series(chip: ChipModel, hours=AGING_HOURS, stress: Environment = STRESS_ENV,
               seed: int = 0) -> list[ChipModel]:
    """Snapshots of one chip along a single cumulative stress path."""
    out, current, last = [], chip, 0.0
    for step, h in enumerate(hours):
        if h < last:
            raise ValueError("hours must be non-decreasing")
        current = apply_aging(current, h - last, stress, derive_rng(seed, "aging", chip.chip_id, step))
        out.append(current)
        last = h
    return out


def aging_experiment(cfg: ModelConfig, n_chips: int, n_evals: int, seed: int, hours=AGING_HOURS,
                     enroll_hours=(0.0, 24.0, 48.0), env: Environment = WORST_CORNER,
                     skews=None, rows: int = 32, cols: int = 128) -> list[dict]:
    """Masking ratio needed for zero errors at ``env`` after each stress interval.

    S-ASCH rows re-enroll (golden key and map at nominal) at each hour in
    ``enroll_hours``; D-ASCH rows keep the hour-0 server planes and redo the
    power-up check at ``env`` on the aged chip.
    """
    hours = list(hours)
    base = make_chips(cfg, n_chips, rows, cols)
    series = [age_series(c, hours, seed=seed) for c in base]
    out = []
    gold0 = [enroll_golden(s[0], seed) for s in series]
    for t_idx, h in enumerate(hours):
        aged = [s[t_idx] for s in series]
        search = find_zero_ber_skew("d-asch", aged, gold0, [env], n_evals, seed, skews)
        out.append(dict(mode="d-asch", enrolled_at=0.0, hours=h, skew_mV=search.skew_mV,
                        masking_ratio=search.masking_ratio))
    for e_h in enroll_hours:
        if e_h not in hours:
            continue
        e_idx = hours.index(e_h)
        enrolled = [s[e_idx] for s in series]
        goldens = [enroll_golden(c, seed) for c in enrolled]
        for t_idx in range(e_idx, len(hours)):
            aged = [s[t_idx] for s in series]
            search = find_zero_ber_skew("s-asch", aged, goldens, [env], n_evals, seed, skews,
                                        enroll_chips=enrolled)
            out.append(dict(mode="s-asch", enrolled_at=e_h, hours=hours[t_idx], skew_mV=search.skew_mV,
                             masking_ratio=search.masking_ratio))
    return out
