"""How noisy is a raw cell array, and how does the shipped model compare to silicon?

Draws ten 32x128 chips from the default model, takes noise-averaged golden
bits at 1.2 V / 25 degC, then counts raw bit errors at nominal, across
temperature and across supply.
"""

from aschpuf.cell import ModelConfig
from aschpuf.experiments import analytic_raw_ber, calibration_report, fit_noise
from aschpuf.metrics import format_table

cfg = ModelConfig()
print(f"model: sigma_process={cfg.sigma_process} mV, sigma_noise={cfg.sigma_noise} mV, "
      f"tempco sigma={cfg.sigma_tempco} uV/degC, voltco sigma={cfg.sigma_voltco} uV/V\n")

rows = [dict(name=t.name, measured=f"{t.value:.3e}", target=t.target, window=f"[{t.low:g}, {t.high:g}]",
             ok=t.ok) for t in calibration_report(cfg, n_chips=10, n_evals=2000)]
print(format_table(rows))

# the nominal BER has a closed form: atan(sigma_noise / sigma_process) / pi
print(f"\nclosed-form nominal BER: {analytic_raw_ber(cfg.sigma_process, cfg.sigma_noise, [0.0]):.3e}")
print(f"noise sigma that would give exactly 2.9e-3: {fit_noise(cfg.sigma_process):.4f} mV")
