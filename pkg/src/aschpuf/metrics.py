"""Stability, detection, uniqueness and randomness metrics."""

from __future__ import annotations

import csv
import io
import math
from fractions import Fraction
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np
from scipy.special import erfc


class EmptyPopulation(ValueError):
    pass


class NoDarkBits(ValueError):
    pass


class InsufficientPopulation(ValueError):
    pass


@dataclass(frozen=True)
class BerReport:
    n_bits: int
    n_evals: int
    n_errors: int
    masking_ratio: float
    ber: float
    pessimistic_ber: float | None
    unstable_fraction: float
    n_unmasked: int

    def reported(self) -> float:
        """The observed BER, or the pessimistic bound when nothing failed."""
        return self.ber if self.n_errors else self.pessimistic_ber


def pessimistic_ber(n_bits: int, masking_ratio: float, n_evals: int) -> float:
    """Upper bound quoted when no error was observed: one error in the next readout."""
    if not 0 <= masking_ratio < 1:
        raise ValueError("masking_ratio must lie in [0, 1)")
    if n_evals < 1 or n_bits < 1:
        raise ValueError("n_bits and n_evals must be >= 1")
    # exact rational arithmetic, one final rounding
    return float(1 / (Fraction(n_bits) * (1 - Fraction(masking_ratio)) * n_evals))


def ber_from_counts(error_counts, n_evals: int, mask=None) -> BerReport:
    """BER from per-bit error counts accumulated over ``n_evals`` evaluations."""
    counts = np.asarray(error_counts).ravel()
    mask = np.zeros(counts.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    if mask.shape != counts.shape:
        raise ValueError("mask and counts differ in size")
    kept = counts[~mask]
    if kept.size == 0:
        raise EmptyPopulation("every bit is masked")
    n_bits = counts.size
    n_masked = int(np.count_nonzero(mask))
    ratio = n_masked / n_bits
    n_errors = int(kept.sum())
    ber = n_errors / (kept.size * n_evals)
    pes = pessimistic_ber(n_bits, ratio, n_evals) if n_errors == 0 else None
    return BerReport(n_bits, n_evals, n_errors, ratio, ber, pes,
                     float(np.count_nonzero(kept)) / kept.size, int(kept.size))


def ber(evals, golden, mask=None) -> BerReport:
    """Bit error rate of an evaluation matrix against golden bits.

    ``evals`` has one row per evaluation; the remaining axes must match
    ``golden``.
    """
    evals = np.asarray(evals, dtype=bool)
    golden = np.asarray(golden, dtype=bool)
    if evals.shape[1:] != golden.shape:
        raise ValueError(f"evaluation shape {evals.shape[1:]} does not match golden {golden.shape}")
    errors = (evals != golden).sum(axis=0)
    return ber_from_counts(errors, evals.shape[0], mask)


def combine_reports(reports) -> BerReport:
    """Pool reports that share ``n_evals`` (e.g. several chips)."""
    reports = list(reports)
    n_evals = {r.n_evals for r in reports}
    if len(n_evals) != 1:
        raise ValueError("reports must share n_evals")
    (n_evals,) = n_evals
    n_bits = sum(r.n_bits for r in reports)
    masked = sum(r.n_bits - r.n_unmasked for r in reports)
    unmasked = n_bits - masked
    n_errors = sum(r.n_errors for r in reports)
    unstable = sum(r.unstable_fraction * r.n_unmasked for r in reports) / unmasked
    ratio = masked / n_bits
    pes = pessimistic_ber(n_bits, ratio, n_evals) if n_errors == 0 else None
    return BerReport(n_bits, n_evals, n_errors, ratio, n_errors / (unmasked * n_evals), pes, unstable, unmasked)


def ker(ber_value: float, n_key_bits: int) -> float:
    """Probability that an ``n_key_bits`` key has at least one wrong bit."""
    if not 0 <= ber_value <= 1:
        raise ValueError("ber must lie in [0, 1]")
    if ber_value == 1:
        return 1.0
    return -math.expm1(n_key_bits * math.log1p(-ber_value))


@dataclass(frozen=True)
class DetectionReport:
    accuracy: float
    rate: float
    n_dark: int
    n_unstable: int
    n_detected: int


def detection_accuracy(dark, unstable_oracle) -> DetectionReport:
    """Share of flagged cells that are truly unstable, plus the share of unstable cells flagged."""
    dark = np.asarray(dark, dtype=bool)
    oracle = np.asarray(unstable_oracle, dtype=bool)
    n_dark = int(np.count_nonzero(dark))
    if n_dark == 0:
        raise NoDarkBits("no dark bits flagged")
    n_unstable = int(np.count_nonzero(oracle))
    hit = int(np.count_nonzero(dark & oracle))
    rate = hit / n_unstable if n_unstable else 1.0
    return DetectionReport(hit / n_dark, rate, n_dark, n_unstable, hit)


def hamming(a, b) -> float:
    a = np.asarray(a, dtype=bool).ravel()
    b = np.asarray(b, dtype=bool).ravel()
    if a.shape != b.shape:
        raise ValueError("keys differ in length")
    return float(np.count_nonzero(a != b)) / a.size


@dataclass(frozen=True)
class HdReport:
    inter_mean: float
    intra_mean: float
    inter: np.ndarray
    intra: np.ndarray

    @property
    def separation(self) -> float:
        return math.inf if self.intra_mean == 0 else self.inter_mean / self.intra_mean


def hamming_suites(keys_by_chip, reevals_by_chip) -> HdReport:
    """Inter-die HD over chip pairs and intra-die HD of re-evaluations against each chip's key.

    ``keys_by_chip`` maps chip -> reference bits; ``reevals_by_chip`` maps
    chip -> iterable of re-evaluated bit vectors.
    """
    keys = dict(keys_by_chip)
    if len(keys) < 2:
        raise InsufficientPopulation("need at least two chips for inter-die HD")
    inter = np.array([hamming(keys[a], keys[b]) for a, b in combinations(sorted(keys), 2)])
    intra = []
    for chip, reevals in reevals_by_chip.items():
        reevals = list(reevals)
        if len(reevals) < 2:
            raise InsufficientPopulation(f"chip {chip!r} needs at least two re-evaluations")
        intra.extend(hamming(keys[chip], r) for r in reevals)
    intra = np.array(intra)
    intra_mean = float(intra.mean()) if intra.size else math.nan
    return HdReport(float(inter.mean()), intra_mean, inter, intra)


WHITE_NOISE_Z = 1.645
TWO_SIDED_95_Z = 1.96


def autocorrelation(bits, max_lag: int, z: float = WHITE_NOISE_Z) -> tuple[np.ndarray, float]:
    """Sample ACF of the +/-1 mapped bits for lags 1..max_lag, with bound z/sqrt(N)."""
    x = np.where(np.asarray(bits, dtype=bool).ravel(), 1.0, -1.0)
    n = x.size
    if n <= max_lag:
        raise ValueError("sequence must be longer than max_lag")
    x = x - x.mean()
    denom = float(np.dot(x, x))
    if denom == 0:
        acf = np.zeros(max_lag)
    else:
        acf = np.array([np.dot(x[:-k], x[k:]) / denom for k in range(1, max_lag + 1)])
    return acf, z / math.sqrt(n)


@dataclass(frozen=True)
class RandomnessReport:
    n_bits: int
    monobit_p: float
    runs_p: float
    alpha: float = 0.01

    @property
    def monobit_pass(self) -> bool:
        return self.monobit_p >= self.alpha

    @property
    def runs_pass(self) -> bool:
        return self.runs_p >= self.alpha

    @property
    def passed(self) -> bool:
        return self.monobit_pass and self.runs_pass


def monobit_test(bits) -> float:
    x = np.asarray(bits, dtype=bool).ravel()
    n = x.size
    s = abs(2 * int(np.count_nonzero(x)) - n)
    return float(erfc(s / math.sqrt(2 * n)))


def runs_test(bits) -> float:
    x = np.asarray(bits, dtype=bool).ravel()
    n = x.size
    pi = np.count_nonzero(x) / n
    # frequency prerequisite; the runs statistic is meaningless otherwise
    if abs(pi - 0.5) >= 2 / math.sqrt(n):
        return 0.0
    runs = 1 + int(np.count_nonzero(x[1:] != x[:-1]))
    num = abs(runs - 2 * n * pi * (1 - pi))
    den = 2 * math.sqrt(2 * n) * pi * (1 - pi)
    return float(erfc(num / den))


def randomness_battery(bits, alpha: float = 0.01) -> RandomnessReport:
    bits = np.asarray(bits, dtype=bool).ravel()
    if bits.size < 4096:
        raise ValueError("randomness battery needs at least 4096 bits")
    return RandomnessReport(bits.size, monobit_test(bits), runs_test(bits), alpha)


def reports_to_csv(rows, columns=None) -> str:
    """Render dataclass or mapping rows as CSV with a header line."""
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in rows]
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in columns})
    return buf.getvalue()


def format_table(rows, columns=None) -> str:
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in rows]
    columns = list(columns or (rows[0].keys() if rows else []))
    cells = [[str(c) for c in columns]] + [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)
