"""Can a skewed self-check find the cells that will flip over temperature?

Uses the noise-dominated preset on 100k cells. The oracle brute-forces 1000
evaluations at twelve temperatures; the self-check only looks at nominal
conditions with +/-6 mV of skew.
"""

import numpy as np

from aschpuf._rng import derive_rng
from aschpuf.asch import self_check
from aschpuf.cell import NOMINAL, CellConfig, Environment, ModelConfig, ground_truth_unstable, sample_chip
from aschpuf.metrics import detection_accuracy

cfg = ModelConfig.spice()
chip = sample_chip(cfg, "demo", 100, 1000)
grid = [Environment(1.2, float(t)) for t in np.linspace(-40, 125, 12)]

oracle = ground_truth_unstable(chip, CellConfig.ORIGINAL, grid, derive_rng(cfg.seed, "oracle"), n_evals=1000)
print(f"oracle: {oracle.sum()} of {chip.size} cells flip somewhere in -40..125 degC")

for skew in (2.0, 4.0, 6.0, 8.0):
    check = self_check(chip, CellConfig.ORIGINAL, NOMINAL, skew, derive_rng(cfg.seed, "check"))
    rep = detection_accuracy(check.dark, oracle)
    lo, hi = check.skews_mV
    print(f"skew {skew:4.1f} mV (applied {lo:+.2f}/{hi:+.2f}): {check.dark.sum():5d} dark, "
          f"rate {rep.rate:6.2%}, accuracy {rep.accuracy:6.2%}, {check.timing.wall_time_us:.0f} us")
