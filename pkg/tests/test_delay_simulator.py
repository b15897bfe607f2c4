"""
Unit Tests for the Delay Simulator
==================================
Link equations, retransmission accounting and Monte-Carlo delay statistics.

Run with: pytest tests/test_delay_simulator.py -v
"""

import math
import os
import sys
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import ks_2samp

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.delay_simulator import (
    DelaySimulator,
    LinkDraw,
    attempt_ttis,
    compute_latency,
    e2e_delay,
    nearest_association,
    one_direction_latency,
    pathloss_matrix,
    rate,
    reference_plan,
    reliability,
    sinr_uplink,
    ttis_needed,
)
from src.scenario import AllocationPlan, NetworkScenario, TaskModel, TaskSpec, validate_plan


# ============================================================================
# Link Equation Tests
# ============================================================================


class TestLinkEquations:
    """Test suite for SINR, rate and TTI accounting."""

    def test_sinr_hand_value(self):
        """P_m = 10 mW, h = 1, L = 1e-6, noise 1e-8 mW -> SINR 1000."""
        s = _scenario(bandwidth_hz=1e6, noise_psd_dbm_hz=-140.0)
        assert sinr_uplink(0, 0, LinkDraw(1.0, 1e-6, 0.0), s) == pytest.approx(1000.0)

    def test_sinr_deep_fade(self):
        s = _scenario()
        assert sinr_uplink(0, 0, LinkDraw(0.0, 1e-6, 0.0), s) == 0.0

    def test_sinr_decreases_with_interference(self):
        s = _scenario()
        values = [sinr_uplink(0, 0, LinkDraw(1.0, 1e-9, i), s) for i in (0.0, 1e-9, 1e-6, 1e-3, 1.0)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] < 1e-6

    @pytest.mark.parametrize("m, n", [(1, 0), (0, 1), (-1, 0)])
    def test_sinr_link_outside_scenario(self, m, n):
        with pytest.raises(ValueError, match="outside"):
            sinr_uplink(m, n, LinkDraw(1.0, 1e-6, 0.0), _scenario())

    @pytest.mark.parametrize(
        "gamma, w, expected", [(1.0, 1e6, 1e6), (0.0, 1e6, 0.0), (3.0, 1e8, 2e8)]
    )
    def test_rate(self, gamma, w, expected):
        assert rate(gamma, w) == pytest.approx(expected)

    def test_negative_sinr_rejected(self):
        with pytest.raises(ValueError):
            rate(-0.1, 1e6)

    def test_ttis_needed_exact_multiple(self):
        """10 kbit at 10 Mbit/s with 1 ms TTIs fits one TTI."""
        assert ttis_needed(1e4, 1e7, 1.0) == 1
        assert ttis_needed(1e4 + 1, 1e7, 1.0) == 2

    def test_pathloss_clamped_at_reference(self):
        s = _scenario(ue_positions=((0.0, 0.0),))
        assert pathloss_matrix(s)[0, 0] == pytest.approx(10 ** (-s.pathloss_ref_db / 10))


# ============================================================================
# Retransmission Tests
# ============================================================================


class TestOneDirectionLatency:
    """Test suite for the retransmit-until-decoded loop."""

    def test_first_attempt_succeeds(self):
        """10 kbit over a 10 Mbit/s link: one TTI."""
        s = _scenario(bandwidth_hz=1e7, sinr_decode_threshold=0.5)
        ttis, ok = one_direction_latency(1e4, lambda r: 1.0, 1e7, s, _rng())
        assert (ttis, ok) == (1, True)

    def test_two_attempts_of_two_ttis(self):
        """A failed and a decoded attempt costing 2 TTIs each add up to 4."""
        s = _scenario(bandwidth_hz=1e6, sinr_decode_threshold=1.0)
        draws = iter([0.9, 1.0])
        ttis, ok = one_direction_latency(1500.0, lambda r: next(draws), 1e6, s, _rng())
        assert (ttis, ok) == (4, True)

    def test_failed_attempt_charged_at_its_own_rate(self):
        """1500 bits at SINR 0.5 (585 bits/TTI) take 3 TTIs, then 2 TTIs at SINR 1."""
        s = _scenario(bandwidth_hz=1e6, sinr_decode_threshold=1.0)
        draws = iter([0.5, 1.0])
        ttis, ok = one_direction_latency(1500.0, lambda r: next(draws), 1e6, s, _rng())
        assert (ttis, ok) == (math.ceil(1500 / (1e3 * math.log2(1.5))) + 2, True)
        assert ttis == 5

    def test_retransmission_cap(self):
        """Past max_retx retransmissions the task is dropped; every attempt is counted."""
        s = _scenario(bandwidth_hz=1e6, sinr_decode_threshold=1.0, max_retx=3)
        ttis, ok = one_direction_latency(1500.0, lambda r: 0.5, 1e6, s, _rng())
        assert not ok
        assert ttis == 4 * 3

    def test_attempt_ttis_floor(self):
        assert attempt_ttis(10.0, 3.0, 1e6, 1.0) == 1
        assert attempt_ttis(1e4, 0.0, 1e6, 1.0) == 1
        assert attempt_ttis(1e4, 1.0, 1e6, 1.0) == 10

    def test_zero_threshold_failure_costs_one_tti(self):
        """With a 0 threshold only a zero SINR fails, costing a single TTI."""
        s = _scenario(bandwidth_hz=1e6, sinr_decode_threshold=0.0)
        draws = iter([0.0, 3.0])
        ttis, ok = one_direction_latency(1000.0, lambda r: next(draws), 1e6, s, _rng())
        assert (ttis, ok) == (2, True)

    def test_interference_never_reduces_latency(self):
        """Same fading draws, more interference: latency does not drop."""
        s = _scenario()
        for seed in range(20):
            totals = []
            for interference in (0.0, 1e-10, 1e-9, 1e-8):
                def draw(r, i=interference):
                    return sinr_uplink(0, 0, LinkDraw(r.exponential(1.0), 2e-10, i), s)

                totals.append(one_direction_latency(8e3, draw, s.bandwidth_hz, s, _rng(seed))[0])
            assert totals == sorted(totals)


# ============================================================================
# Delay Arithmetic Tests
# ============================================================================


class TestDelayArithmetic:
    """Test suite for compute latency, E2E delay and reliability."""

    def test_compute_latency(self):
        task = TaskSpec.from_cycles(0, 1e3, 1e3, 2e7)
        assert compute_latency(task, 2e9) == pytest.approx(10.0)
        assert compute_latency(task, 4e9) == pytest.approx(5.0)

    def test_zero_cycles(self):
        assert compute_latency(TaskSpec(0, 1e3, 1e3, 0.0), 1e9) == 0.0

    def test_zero_frequency_rejected(self):
        with pytest.raises(ValueError):
            compute_latency(TaskSpec(0, 1e3, 1e3, 1.0), 0.0)

    @pytest.mark.parametrize(
        "ttis, tti, tau_p, expected", [(3, 1.0, 2.0, 5.0), (0, 7.0, 7.0, 7.0), (5, 0.5, 2.5, 5.0)]
    )
    def test_e2e_delay(self, ttis, tti, tau_p, expected):
        assert e2e_delay(ttis, tti, tau_p) == pytest.approx(expected)

    def test_e2e_rejects_negative(self):
        with pytest.raises(ValueError):
            e2e_delay(-1, 1.0, 1.0)

    def test_reliability(self):
        assert reliability([10.0] * 5, 20.0) == 1.0
        assert reliability([10.0] * 5, 10.0) == 0.0
        assert reliability(np.arange(1, 101), 30.0) == pytest.approx(0.29)

    def test_reliability_empty(self):
        with pytest.raises(ValueError):
            reliability([], 10.0)


# ============================================================================
# DelaySimulator Tests
# ============================================================================


class TestDelaySimulator:
    """Test suite for drops, determinism and the straight-line oracle."""

    def test_one_ue_one_bs_record_count(self):
        s = _scenario()
        result = DelaySimulator(s, reference_plan(s), TaskModel()).run(100, seed=1)
        assert len(result.samples) + len(result.dropped) == 100

    def test_zero_drops_rejected(self):
        s = _scenario()
        with pytest.raises(ValueError):
            DelaySimulator(s, reference_plan(s), TaskModel()).run(0, seed=1)

    def test_unserved_plan_rejected(self):
        s = _scenario()
        with pytest.raises(ValueError):
            DelaySimulator(s, AllocationPlan.empty(1, 1), TaskModel()).run(5, seed=1)

    def test_deterministic_for_any_worker_count(self, crowded):
        sim = DelaySimulator(crowded, reference_plan(crowded), TaskModel())
        a = sim.run(40, seed=5)
        b = sim.run(40, seed=5, workers=4)
        assert a.samples.equals(b.samples)
        assert not a.samples.equals(sim.run(40, seed=6).samples)

    def test_reference_plan_is_feasible(self, crowded):
        plan = reference_plan(crowded)
        assert validate_plan(plan, crowded) == []
        np.testing.assert_array_equal(plan.bs_of(), nearest_association(crowded))

    def test_compute_delay_matches_allocation(self):
        """With one UE on its BS, tau_p = c_m / f exactly."""
        s = _scenario()
        model = TaskModel().with_trace([3e7])
        plan = AllocationPlan.from_bs_of([0], [3e9], 1)
        result = DelaySimulator(s, plan, model).run(20, seed=2)
        np.testing.assert_allclose(result.samples["tau_p_ms"], 10.0)

    def test_probe_bank_shape(self, crowded):
        sim = DelaySimulator(crowded, reference_plan(crowded), TaskModel())
        bank = sim.probe_bank(10, seed=3)
        assert bank.shape == (crowded.n_ue, crowded.n_bs)
        assert bank.tau_t_ttis.shape == (crowded.n_ue, crowded.n_bs, 10)
        assert bank.cycles.shape == (crowded.n_ue, 10)
        probes, cycles = bank.to_frames()
        assert len(probes) == int(np.isfinite(bank.tau_t_ttis).sum())
        assert len(cycles) == crowded.n_ue * 10

    @pytest.mark.parametrize("layout", ["single_link", "shared_band", "high_threshold"])
    def test_matches_straight_line_oracle(self, layout):
        """Transmission delays follow an independent reimplementation of the link model."""
        s, n_drops = _oracle_layouts()[layout]
        model = TaskModel(1e3, 1e4)
        result = DelaySimulator(s, reference_plan(s), model).run(n_drops, seed=11)
        simulated = result.samples["tau_t_ttis"].to_numpy(dtype=float)
        oracle = _oracle_transmission(s, model, len(simulated), np.random.default_rng(12345))

        assert ks_2samp(simulated, oracle).pvalue > 0.01
        stderr = math.sqrt(np.var(oracle) / len(oracle) + np.var(simulated) / len(simulated))
        assert abs(simulated.mean() - oracle.mean()) < 4 * stderr + 1e-12

    def test_more_competitors_slow_transmission(self):
        """Equal bandwidth sharing: a crowded cell transmits no faster than a lone UE."""
        lone = _scenario(ue_positions=((60.0, 0.0),))
        crowd = _scenario(
            n_ue=6, ue_positions=tuple((60.0, float(k)) for k in range(6)), bandwidth_sharing="equal"
        )
        model = TaskModel(5e4, 1e5)
        a = DelaySimulator(lone, reference_plan(lone), model).run(300, seed=4)
        b = DelaySimulator(crowd, reference_plan(crowd), model).run(300, seed=4)
        assert b.samples["tau_t_ttis"].mean() > a.samples["tau_t_ttis"].mean()


# ============================================================================
# Helpers and Fixtures
# ============================================================================


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def _scenario(**overrides) -> NetworkScenario:
    fields = dict(
        n_bs=1,
        n_ue=1,
        bs_positions=((0.0, 0.0),),
        ue_positions=((80.0, 0.0),),
        sinr_decode_threshold=1.0,
    )
    fields.update(overrides)
    return NetworkScenario(**fields)


def _oracle_layouts():
    """Interference-free layouts where every served UE sees the same link law."""
    single = _scenario(ue_positions=((50.0, 0.0),))
    shared = _scenario(
        n_ue=3,
        ue_positions=((50.0, 0.0), (0.0, 50.0), (-50.0, 0.0)),
        bandwidth_sharing="equal",
        activity_factor=1.0,
    )
    return {
        "single_link": (single, 4000),
        "shared_band": (shared, 1500),
        "high_threshold": (replace(single, sinr_decode_threshold=10.0), 4000),
    }


def _oracle_transmission(s: NetworkScenario, model: TaskModel, n: int, rng) -> np.ndarray:
    """
    Straight-line model of one UE: no interference, a band split equally among the n_ue
    always-active UEs, a fresh Rayleigh fade per attempt, every attempt charged at its own rate.
    """
    distance = max(math.dist(s.ue_positions[0], s.bs_positions[0]), 1.0)
    gain = 10 ** (-(s.pathloss_ref_db + 10 * s.pathloss_exponent * math.log10(distance)) / 10)
    band = s.bandwidth_hz / s.n_ue if s.bandwidth_sharing == "equal" else s.bandwidth_hz
    noise = 10 ** (s.noise_psd_dbm_hz / 10) * band
    tti_s = s.tti_ms / 1e3

    out = []
    while len(out) < n:
        total, ok = 0, True
        for power, bits in ((s.p_ue_mw, rng.uniform(model.packet_bits_min, model.packet_bits_max)),
                            (s.p_bs_mw, rng.uniform(model.packet_bits_min, model.packet_bits_max))):
            for _ in range(s.max_retx + 1):
                snr = power * gain * rng.exponential(1.0) / noise
                bits_per_tti = band * math.log2(1 + snr) * tti_s
                total += max(1, math.ceil(bits / bits_per_tti - 1e-9)) if bits_per_tti > 0 else 1
                if snr >= s.sinr_decode_threshold:
                    break
            else:
                ok = False
        if ok:
            out.append(total)
    return np.asarray(out, dtype=float)


@pytest.fixture
def crowded():
    return NetworkScenario(
        n_bs=2,
        n_ue=5,
        bs_positions=((0.0, 0.0), (200.0, 0.0)),
        ue_positions=((20.0, 10.0), (40.0, -5.0), (150.0, 0.0), (180.0, 30.0), (90.0, 0.0)),
        sinr_decode_threshold=1.0,
    )
