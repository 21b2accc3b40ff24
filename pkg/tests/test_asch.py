from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aschpuf.asch import (
    Comparator,
    DacModel,
    TargetOutOfRange,
    TimingReport,
    asc_only,
    coarse_lock,
    fine_lock,
    lock,
    noiseless_settings,
    run_d_asch_powerup,
    run_s_asch,
    self_check,
)
from aschpuf.cell import NOMINAL, CellConfig, Environment, ModelConfig, sample_chip, static_margin
from aschpuf.keygen import stabilize_readout
from aschpuf.maps import MapSource

DAC = DacModel()
QUIET = Comparator(DAC, noiseless=True)


class TestDac:
    def test_geometry(self):
        assert DAC.coarse_lsb_mV == pytest.approx(2.08)
        assert DAC.n_codes == 4096
        assert DAC.v1(128, 0) == DAC.center_mV
        lo, hi = DAC.span_mV
        assert lo == pytest.approx(615 - 128 * 2.08)

    def test_centered_target(self):
        code, cycles = coarse_lock(DAC, DAC.center_mV, QUIET)
        assert code == 128 and cycles == 8
        assert abs(DAC.v1(code) - DAC.center_mV) < DAC.coarse_lsb_mV

    def test_offset_target_within_one_coarse_lsb(self):
        v2 = DAC.center_mV + 17.0
        code, _ = coarse_lock(DAC, v2, QUIET)
        scan = [c for c in range(256) if DAC.v1(c) <= v2]
        assert abs(code - max(scan)) <= 1

    @pytest.mark.parametrize("offset", [-400.0, 400.0])
    def test_out_of_range(self, offset):
        with pytest.raises(TargetOutOfRange):
            coarse_lock(DAC, DAC.center_mV + offset, QUIET)

    def test_fine_residual_0p2(self):
        coarse = 128
        v2 = DAC.v1(coarse) + 0.2
        fine, cycles = fine_lock(DAC, coarse, v2, QUIET)
        scan = int(np.argmin([abs(DAC.v1(coarse, f) - v2) for f in range(16)]))
        assert abs(fine - scan) <= 1 and fine == 2 and cycles == 3

    def test_fine_zero_residual_one_cycle(self):
        assert fine_lock(DAC, 100, DAC.v1(100), QUIET) == (0, 1)

    def test_worst_case_24_cycles(self):
        coarse = 100
        state_fine, cycles = fine_lock(DAC, coarse, DAC.v1(coarse, 15) + 0.1, QUIET)
        assert (state_fine, cycles) == (15, 16)
        assert 8 + cycles == 24

    @settings(max_examples=300)
    @given(st.floats(-30, 30))
    def test_noiseless_residual_bound(self, offset):
        state = lock(DAC, DAC.center_mV + offset, QUIET)
        assert abs(state.residual_mV) <= DAC.fine_lsb_mV + 1e-9
        assert state.cycles_used <= 24

    def test_noisy_comparator_majority(self):
        rng = np.random.default_rng(0)
        comp = Comparator(DAC, rng)
        # near-tie decisions are right most of the time, far ones always
        near = [comp.at_or_above(1.0, 0.95) for _ in range(5000)]
        assert 0.99 < np.mean(near) < 1.0
        assert all(comp.at_or_above(1.0, 0.5) for _ in range(100))

    def test_noisy_lock_stays_within_budget(self):
        rng = np.random.default_rng(2)
        comp = Comparator(DAC, rng)
        for _ in range(500):
            state = lock(DAC, DAC.center_mV + rng.uniform(-30, 30), comp)
            assert state.cycles_used <= 24
            assert abs(state.residual_mV) <= 2 * DAC.fine_lsb_mV + 1e-9


class TestTiming:
    def test_budget_arithmetic(self):
        t = TimingReport(24, 64)
        assert t.total_cycles == 88 and t.wall_time_us == 1760

    def test_sum(self):
        t = TimingReport(20, 64) + TimingReport(24, 64)
        assert t.total_cycles == 172 and t.checks == 2 and t.wall_time_us == 3440

    def test_mismatched_periods(self):
        with pytest.raises(ValueError):
            TimingReport(1, 1, 20) + TimingReport(1, 1, 10)

    def test_self_check_budget(self, chip, rng):
        res = self_check(chip, CellConfig.ORIGINAL, NOMINAL, 5.0, rng)
        assert res.timing.skew_detect_cycles == 64
        assert res.timing.total_cycles <= 88
        assert res.timing.wall_time_us <= 1760


@pytest.fixture
def quiet_chip():
    return sample_chip(ModelConfig().noiseless(), "quiet", 16, 32)


class TestSelfCheck:
    def test_noiseless_soundness(self, quiet_chip):
        rng = np.random.default_rng(4)
        res = self_check(quiet_chip, CellConfig.ORIGINAL, NOMINAL, 8.0, rng, noiseless_settings())
        lo, hi = res.skews_mV
        m = static_margin(quiet_chip, CellConfig.ORIGINAL, NOMINAL)
        differs = (m + lo >= 0) != (m + hi >= 0)
        assert np.array_equal(res.dark, differs)
        assert not res.dark[np.abs(m) > 8.0 + DAC.fine_lsb_mV].any()
        assert res.dark[np.abs(m) < 8.0 - DAC.fine_lsb_mV].all()

    def test_effective_skew_includes_lock_residual(self, quiet_chip):
        res = self_check(quiet_chip, CellConfig.ORIGINAL, NOMINAL, 6.0, np.random.default_rng(1),
                         noiseless_settings())
        lo, hi = res.skews_mV
        assert hi - lo == pytest.approx(2 * round(6.0 / DAC.fine_lsb_mV) * DAC.fine_lsb_mV)
        assert abs(hi - 6.0) <= DAC.fine_lsb_mV + 0.03

    def test_order_does_not_matter_noiseless(self, quiet_chip):
        a = self_check(quiet_chip, CellConfig.HEALED, NOMINAL, 4.0, np.random.default_rng(3), noiseless_settings())
        b = self_check(quiet_chip, CellConfig.HEALED, NOMINAL, 4.0, np.random.default_rng(3),
                       replace(noiseless_settings(), negative_first=False))
        assert np.array_equal(a.dark, b.dark)

    def test_skew_monotone_noiseless(self, quiet_chip):
        settings = replace(noiseless_settings(), dac=DAC)
        chip = replace(quiet_chip, model=replace(quiet_chip.model, imbalance_range=0.0))
        darks = [self_check(chip, CellConfig.ORIGINAL, NOMINAL, s, np.random.default_rng(0), settings).dark
                 for s in (0.0, 2.0, 5.0, 10.0, 20.0)]
        for a, b in zip(darks, darks[1:]):
            assert not (a & ~b).any()

    def test_dark_count_grows_with_skew_noisy(self, chip):
        counts = [self_check(chip, CellConfig.ORIGINAL, NOMINAL, s, np.random.default_rng(7)).dark.sum()
                  for s in (1.0, 4.0, 8.0, 16.0)]
        assert counts == sorted(counts)

    def test_zero_skew_noiseless_is_empty(self, quiet_chip):
        res = self_check(quiet_chip, CellConfig.ORIGINAL, NOMINAL, 0.0, np.random.default_rng(0),
                         noiseless_settings())
        assert not res.dark.any()


class TestFlows:
    def test_s_asch_structure(self, chip):
        flow = run_s_asch(chip, NOMINAL, 10.0, np.random.default_rng(0))
        m = flow.map
        assert np.array_equal(m.mask, flow.dark_original & flow.dark_healed)
        assert np.array_equal(m.heal, flow.dark_original & ~flow.dark_healed)
        assert not (m.heal & m.mask).any()
        assert m.source == MapSource.STATIC and m.skew_mV == 10.0
        assert flow.timing.checks == 2 and flow.timing.wall_time_us < 4000
        assert flow.key.length == m.n_usable

    def test_healing_shrinks_mask(self, chip):
        s = run_s_asch(chip, NOMINAL, 12.0, np.random.default_rng(5))
        a, _ = asc_only(chip, NOMINAL, 12.0, np.random.default_rng(5))
        assert np.array_equal(a.mask, s.dark_original)
        assert not (s.map.mask & ~a.mask).any()
        assert s.map.masking_ratio < a.masking_ratio

    def test_s_asch_zero_skew_noiseless(self, quiet_chip):
        rng = np.random.default_rng(0)
        flow = run_s_asch(quiet_chip, NOMINAL, 0.0, rng, noiseless_settings())
        assert not flow.map.mask.any() and not flow.map.heal.any()
        raw = static_margin(quiet_chip, CellConfig.ORIGINAL, NOMINAL) >= 0
        assert np.array_equal(flow.key.bits, raw.ravel())

    def test_asc_zero_skew_noiseless(self, quiet_chip):
        m, t = asc_only(quiet_chip, NOMINAL, 0.0, np.random.default_rng(0), noiseless_settings())
        assert not m.mask.any() and t.checks == 1

    def test_d_asch_deterministic(self, chip):
        env = Environment(0.8, 100)
        a = run_d_asch_powerup(chip, env, 10.0, np.random.default_rng(11))
        b = run_d_asch_powerup(chip, env, 10.0, np.random.default_rng(11))
        assert a.map == b.map and a.key == b.key
        assert a.map.source == MapSource.DYNAMIC and a.map.env_at_check == env

    def test_d_asch_key_is_readout_at_env(self, quiet_chip):
        env = Environment(1.0, 110)
        flow = run_d_asch_powerup(quiet_chip, env, 10.0, np.random.default_rng(2), noiseless_settings())
        orig = static_margin(quiet_chip, CellConfig.ORIGINAL, env) >= 0
        healed = static_margin(quiet_chip, CellConfig.HEALED, env) >= 0
        assert flow.key == stabilize_readout(orig, healed, flow.map)

    def test_key_length_request(self, chip):
        flow = run_s_asch(chip, NOMINAL, 10.0, np.random.default_rng(0), key_length=128)
        assert flow.key.length == 128
