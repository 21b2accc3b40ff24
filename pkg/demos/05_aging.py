"""What does a static enrollment cost after accelerated aging, compared with a power-up check?

Two chips are stressed at 1.4 V / 150 degC. At each checkpoint we search for
the smallest masking ratio that keeps the worst corner (0.7 V, 125 degC)
error-free, both for a map fixed at hour 0 and for a map rebuilt at power-up.
"""

from aschpuf.cell import ModelConfig, aging_acceleration
from aschpuf.experiments import STRESS_ENV, aging_experiment
from aschpuf.metrics import format_table

cfg = ModelConfig()
accel = aging_acceleration(cfg, STRESS_ENV)
print(f"stress acceleration x{accel:.0f}: 96 h is about {96 * accel / 8766:.1f} years at nominal\n")

rows = aging_experiment(cfg, n_chips=2, n_evals=2000, seed=cfg.seed, enroll_hours=(0.0, 48.0))
for r in rows:
    r["masking_ratio"] = f"{r['masking_ratio']:.3f}"
print(format_table(rows))
