"""
Delay Simulator Module
======================
Purpose: Monte-Carlo simulation of the E2E service delay of offloaded tasks

Pipeline per drop:
1. Draw interferer activity, packet sizes and compute cycles
2. Uplink + downlink transmission with Rayleigh fading, co-channel interference and
   retransmissions until decode (outage model, capped at max_retx)
3. Edge compute latency tau_p = c_m / f(m,n)
4. E2E delay tau = tau_t * T + tau_p

A drop is one independent realization of fading, activity and task sizes. UE positions
(and so path loss) are fixed by the scenario.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.scenario import AllocationPlan, NetworkScenario, TaskModel, TaskSpec, require_valid

logger = logging.getLogger(__name__)

SAMPLE_COLUMNS = ["scenario_id", "drop_id", "ue_id", "bs_id", "tau_t_ttis", "tau_p_ms"]

# SeedSequence namespaces: [seed, namespace, drop_id]
SEED_TRAINING = 1
SEED_PROBE = 3
SEED_EVALUATION = 4


@dataclass(frozen=True)
class LinkDraw:
    fading_gain: float
    pathloss_lin: float
    interference_mw: float


@dataclass(frozen=True)
class DelaySample:
    tau_t_ttis: int
    tau_p_ms: float
    ue_id: int
    bs_id: int
    drop_id: int


# ==========================================
# LINK MODEL
# ==========================================


def pathloss_db(distance_m: np.ndarray, s: NetworkScenario) -> np.ndarray:
    """Log-distance path loss, distances clamped at the 1 m reference."""
    distance = np.maximum(np.asarray(distance_m, dtype=float), 1.0)
    return s.pathloss_ref_db + 10.0 * s.pathloss_exponent * np.log10(distance)


def pathloss_matrix(s: NetworkScenario) -> np.ndarray:
    """Linear path-loss gains L[m, n] between every UE and BS."""
    diff = s.ue_xy[:, None, :] - s.bs_xy[None, :, :]
    distance = np.sqrt((diff**2).sum(axis=2))
    return 10.0 ** (-pathloss_db(distance, s) / 10.0)


def noise_power_mw(s: NetworkScenario, bandwidth_hz: Optional[float] = None) -> float:
    band = s.bandwidth_hz if bandwidth_hz is None else bandwidth_hz
    return s.noise_psd_mw_hz * band


def _check_link(m: int, n: int, s: NetworkScenario):
    if not (0 <= m < s.n_ue and 0 <= n < s.n_bs):
        raise ValueError(f"link ({m}, {n}) outside a {s.n_ue}x{s.n_bs} scenario")


def sinr_uplink(
    m: int, n: int, draw: LinkDraw, s: NetworkScenario, bandwidth_hz: Optional[float] = None
) -> float:
    """SINR of UE m at BS n; noise is taken over `bandwidth_hz` (the full band by default)."""
    _check_link(m, n, s)
    signal = s.gain_ue * s.gain_bs * s.p_ue_mw * draw.fading_gain * draw.pathloss_lin
    return signal / (draw.interference_mw + noise_power_mw(s, bandwidth_hz))


def sinr_downlink(
    m: int, n: int, draw: LinkDraw, s: NetworkScenario, bandwidth_hz: Optional[float] = None
) -> float:
    _check_link(m, n, s)
    signal = s.gain_bs * s.gain_ue * s.p_bs_mw * draw.fading_gain * draw.pathloss_lin
    return signal / (draw.interference_mw + noise_power_mw(s, bandwidth_hz))


def rate(gamma: float, bandwidth_hz: float) -> float:
    """Shannon rate in bits/s."""
    if gamma < 0:
        raise ValueError(f"SINR must be >= 0, got {gamma}")
    return bandwidth_hz * math.log2(1.0 + gamma)


def ttis_needed(bits: float, rate_bps: float, tti_ms: float) -> int:
    # tolerance keeps exact multiples (1e4 bits at 1e4 bits/TTI) from rounding up
    return int(math.ceil(bits / (rate_bps * tti_ms * 1e-3) - 1e-9))


def attempt_ttis(bits: float, gamma: float, bandwidth_hz: float, tti_ms: float) -> int:
    """TTIs one attempt occupies at its own rate, floored at one TTI."""
    r = rate(gamma, bandwidth_hz)
    if r <= 0:
        return 1
    return max(1, ttis_needed(bits, r, tti_ms))


def one_direction_latency(
    bits: float,
    sinr_draw: Callable[[np.random.Generator], float],
    bandwidth_hz: float,
    s: NetworkScenario,
    rng: np.random.Generator,
) -> Tuple[int, bool]:
    """
    Transmit `bits` over one direction until decoded.

    Every attempt draws a fresh SINR and occupies ceil(I / (R T)) TTIs at the rate that SINR
    supports, at least one. It decodes iff SINR >= the decode threshold. Gives up after
    max_retx retransmissions.
    """
    if not bits > 0:
        raise ValueError(f"bits must be > 0, got {bits}")
    threshold = s.sinr_decode_threshold

    total = 0
    for _ in range(s.max_retx + 1):
        gamma = sinr_draw(rng)
        total += attempt_ttis(bits, gamma, bandwidth_hz, s.tti_ms)
        if gamma >= threshold and gamma > 0:
            return total, True
    return total, False


def compute_latency(task: TaskSpec, f_alloc_hz: float) -> float:
    """Edge compute latency in ms."""
    if not f_alloc_hz > 0:
        raise ValueError(f"UE {task.ue_id}: compute frequency must be > 0, got {f_alloc_hz}")
    return task.total_cycles / f_alloc_hz * 1e3


def e2e_delay(tau_t_ttis: float, tti_ms: float, tau_p_ms: float) -> float:
    if tau_t_ttis < 0 or tti_ms < 0 or tau_p_ms < 0:
        raise ValueError("E2E delay inputs must be nonnegative")
    return tau_t_ttis * tti_ms + tau_p_ms


def reliability(samples: Sequence[float], tau_th_ms: float) -> float:
    """Empirical P(tau < tau_th), strict inequality."""
    values = np.asarray(samples, dtype=float)
    if values.size == 0:
        raise ValueError("reliability needs at least one delay sample")
    return float(np.mean(values < tau_th_ms))


def drop_rng(seed: int, namespace: int, drop_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, namespace, drop_id]))


# ==========================================
# RESULTS
# ==========================================


@dataclass
class SimulationResult:
    samples: pd.DataFrame
    dropped: pd.DataFrame

    @property
    def drop_rate(self) -> float:
        total = len(self.samples) + len(self.dropped)
        return len(self.dropped) / total if total else 0.0

    def e2e_ms(self, tti_ms: float) -> np.ndarray:
        return self.samples["tau_t_ttis"].to_numpy() * tti_ms + self.samples["tau_p_ms"].to_numpy()


@dataclass
class SampleBank:
    """
    Probe measurements for every (UE, BS) pair.

    tau_t_ttis[m, n, d] is NaN when the task was dropped. tau_p_ms is measured at the
    load-dependent fair share f_max / k of the probing BS; cycles[m, d] are the raw task cycles.
    """

    tau_t_ttis: np.ndarray
    tau_p_ms: np.ndarray
    cycles: np.ndarray
    tti_ms: float
    scenario_id: str = "desk"

    @property
    def shape(self) -> Tuple[int, int]:
        return self.tau_t_ttis.shape[0], self.tau_t_ttis.shape[1]

    def transmission_ms(self, m: int, n: int) -> np.ndarray:
        values = self.tau_t_ttis[m, n]
        return values[np.isfinite(values)] * self.tti_ms

    def drop_rate(self) -> float:
        return float(np.mean(~np.isfinite(self.tau_t_ttis)))

    def to_frames(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        n_ue, n_bs, n_drops = self.tau_t_ttis.shape
        m, n, d = np.meshgrid(np.arange(n_ue), np.arange(n_bs), np.arange(n_drops), indexing="ij")
        ok = np.isfinite(self.tau_t_ttis)
        probes = pd.DataFrame(
            {
                "scenario_id": self.scenario_id,
                "drop_id": d[ok],
                "ue_id": m[ok],
                "bs_id": n[ok],
                "tau_t_ttis": self.tau_t_ttis[ok].astype(np.int64),
                "tau_p_ms": self.tau_p_ms[ok],
            },
            columns=SAMPLE_COLUMNS,
        ).sort_values(["drop_id", "ue_id", "bs_id"], kind="stable")
        ue, drop = np.meshgrid(np.arange(n_ue), np.arange(n_drops), indexing="ij")
        cycles = pd.DataFrame(
            {"drop_id": drop.ravel(), "ue_id": ue.ravel(), "cycles": self.cycles.ravel()}
        ).sort_values(["drop_id", "ue_id"], kind="stable")
        return probes.reset_index(drop=True), cycles.reset_index(drop=True)

    @classmethod
    def from_frames(
        cls,
        probes: pd.DataFrame,
        cycles: pd.DataFrame,
        n_ue: int,
        n_bs: int,
        tti_ms: float,
    ) -> "SampleBank":
        n_drops = int(cycles["drop_id"].max()) + 1
        tau_t = np.full((n_ue, n_bs, n_drops), np.nan)
        tau_p = np.full((n_ue, n_bs, n_drops), np.nan)
        idx = (probes["ue_id"].to_numpy(), probes["bs_id"].to_numpy(), probes["drop_id"].to_numpy())
        tau_t[idx] = probes["tau_t_ttis"].to_numpy(dtype=float)
        tau_p[idx] = probes["tau_p_ms"].to_numpy(dtype=float)
        cyc = np.zeros((n_ue, n_drops))
        cyc[cycles["ue_id"].to_numpy(), cycles["drop_id"].to_numpy()] = cycles["cycles"].to_numpy()
        scenario_id = str(probes["scenario_id"].iloc[0]) if len(probes) else "desk"
        return cls(tau_t, tau_p, cyc, tti_ms, scenario_id)


# ==========================================
# SIMULATOR
# ==========================================


def nearest_association(s: NetworkScenario) -> np.ndarray:
    """Strongest-path-loss BS per UE, the reference association for probing."""
    return pathloss_matrix(s).argmax(axis=1)


class DelaySimulator:
    """
    Simulates E2E delay samples for the UEs served by an allocation plan.

    `load_floor` switches on mixed-load generation: every drop draws a per-BS activity
    probability p_n ~ U(load_floor, 1) instead of the scenario's activity factor.
    """

    def __init__(
        self,
        scenario: NetworkScenario,
        plan: AllocationPlan,
        task_model: TaskModel,
        load_floor: Optional[float] = None,
    ):
        self.scenario = require_valid(scenario)
        self.plan = plan
        self.task_model = task_model
        self.load_floor = load_floor
        self.pathloss = pathloss_matrix(scenario)
        self.bs_of = plan.bs_of()
        self.served = plan.served_ues()

        logger.debug(
            f"DelaySimulator ready: {len(self.served)} served UEs on {scenario.n_bs} BSs"
        )

    # -------------------------
    # Per-link helpers
    # -------------------------
    def _activity(self, association: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Active flags per UE for this drop (unassociated UEs never transmit)."""
        s = self.scenario
        if self.load_floor is None:
            p_bs = np.full(s.n_bs, s.activity_factor)
        else:
            p_bs = rng.uniform(self.load_floor, 1.0, size=s.n_bs)
        draws = rng.random(s.n_ue)
        p_ue = np.where(association >= 0, p_bs[np.maximum(association, 0)], 0.0)
        return (draws < p_ue) & (association >= 0)

    def _band(self, n_competitors: int) -> float:
        s = self.scenario
        if s.bandwidth_sharing == "equal":
            return s.bandwidth_hz / (1 + n_competitors)
        return s.bandwidth_hz

    def uplink_draw(
        self, m: int, n: int, interferers: np.ndarray, rng: np.random.Generator
    ) -> LinkDraw:
        s = self.scenario
        fading = rng.exponential(1.0)
        others = np.flatnonzero(interferers)
        gains = rng.exponential(1.0, size=others.size)
        interference = s.gain_ue * s.gain_bs * s.p_ue_mw * float(np.sum(gains * self.pathloss[others, n]))
        return LinkDraw(fading, self.pathloss[m, n], interference)

    def downlink_draw(
        self, m: int, n: int, interferers: np.ndarray, rng: np.random.Generator
    ) -> LinkDraw:
        s = self.scenario
        fading = rng.exponential(1.0)
        others = np.flatnonzero(interferers)
        gains = rng.exponential(1.0, size=others.size)
        interference = s.gain_bs * s.gain_ue * s.p_bs_mw * float(np.sum(gains * self.pathloss[m, others]))
        return LinkDraw(fading, self.pathloss[m, n], interference)

    def transmission_latency(
        self,
        m: int,
        n: int,
        task: TaskSpec,
        rng: np.random.Generator,
        bandwidth_hz: Optional[float] = None,
        ul_interferers: Optional[np.ndarray] = None,
        dl_interferers: Optional[np.ndarray] = None,
    ) -> Tuple[int, bool]:
        """tau_t = tau_u + tau_d in TTIs; the flag is False when either direction dropped."""
        s = self.scenario
        band = s.bandwidth_hz if bandwidth_hz is None else bandwidth_hz
        ul = np.zeros(s.n_ue, dtype=bool) if ul_interferers is None else ul_interferers
        dl = np.zeros(s.n_bs, dtype=bool) if dl_interferers is None else dl_interferers

        tau_u, ok_u = one_direction_latency(
            task.uplink_bits,
            lambda r: sinr_uplink(m, n, self.uplink_draw(m, n, ul, r), s, band),
            band,
            s,
            rng,
        )
        if not ok_u:
            return tau_u, False
        tau_d, ok_d = one_direction_latency(
            task.downlink_bits,
            lambda r: sinr_downlink(m, n, self.downlink_draw(m, n, dl, r), s, band),
            band,
            s,
            rng,
        )
        return tau_u + tau_d, ok_d

    def _interferers(
        self, m: int, n: int, association: np.ndarray, active: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Co-served competitors, uplink interferers (other cells) and interfering BSs."""
        others = active.copy()
        others[m] = False
        co_served = others & (association == n)
        ul = others & (association >= 0) & (association != n)
        dl = np.zeros(self.scenario.n_bs, dtype=bool)
        dl[np.unique(association[ul])] = True
        return co_served, ul, dl

    def effective_frequency(self, m: int, n: int, co_served: np.ndarray) -> float:
        """Work-conserving share: idle UEs' frequency is redistributed pro rata."""
        f = self.plan.frequencies[:, n]
        total = float(f[self.bs_of == n].sum())
        busy = float(f[m] + f[co_served].sum())
        return float(f[m]) * total / busy

    # -------------------------
    # Drops
    # -------------------------
    def simulate_drop(
        self, drop_id: int, rng: np.random.Generator
    ) -> Tuple[List[DelaySample], List[Tuple[int, int, int]]]:
        s = self.scenario
        active = self._activity(self.bs_of, rng)
        tasks = [self.task_model.draw(int(m), rng) for m in self.served]

        samples: List[DelaySample] = []
        dropped: List[Tuple[int, int, int]] = []
        for m, task in zip(self.served, tasks):
            m, n = int(m), int(self.bs_of[m])
            co_served, ul, dl = self._interferers(m, n, self.bs_of, active)
            band = self._band(int(co_served.sum()))
            tau_t, ok = self.transmission_latency(m, n, task, rng, band, ul, dl)
            if not ok:
                dropped.append((drop_id, m, n))
                continue
            tau_p = compute_latency(task, self.effective_frequency(m, n, co_served))
            samples.append(DelaySample(tau_t, tau_p, m, n, drop_id))
        return samples, dropped

    def run(
        self,
        n_drops: int,
        seed: int,
        namespace: int = SEED_TRAINING,
        workers: int = 1,
    ) -> SimulationResult:
        """Simulate `n_drops` independent drops; output is identical for any worker count."""
        if n_drops <= 0:
            raise ValueError(f"n_drops must be positive, got {n_drops}")
        if len(self.served) == 0:
            raise ValueError("plan serves no UE; nothing to simulate")

        def one(drop_id: int):
            return self.simulate_drop(drop_id, drop_rng(seed, namespace, drop_id))

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, range(n_drops)))
        else:
            results = [one(d) for d in range(n_drops)]

        rows = [
            (self.scenario.scenario_id, x.drop_id, x.ue_id, x.bs_id, x.tau_t_ttis, x.tau_p_ms)
            for samples, _ in results
            for x in samples
        ]
        drops = [d for _, dropped in results for d in dropped]
        samples_df = pd.DataFrame(rows, columns=SAMPLE_COLUMNS)
        dropped_df = pd.DataFrame(drops, columns=["drop_id", "ue_id", "bs_id"])
        if len(drops):
            logger.warning(f"{len(drops)} tasks dropped after {self.scenario.max_retx} retransmissions")
        logger.info(f"Simulated {n_drops} drops -> {len(samples_df)} delay samples")
        return SimulationResult(samples_df, dropped_df)

    # -------------------------
    # Probing every (UE, BS) pair
    # -------------------------
    def probe_bank(
        self,
        n_drops: int,
        seed: int,
        reference: Optional[np.ndarray] = None,
        workers: int = 1,
    ) -> SampleBank:
        """
        Measure every (UE, BS) pair as if the UE were attached there while the other UEs
        follow `reference` (nearest BS by default).
        """
        s = self.scenario
        association = nearest_association(s) if reference is None else np.asarray(reference)

        def one(drop_id: int):
            rng = drop_rng(seed, SEED_PROBE, drop_id)
            active = self._activity(association, rng)
            tasks = [self.task_model.draw(m, rng) for m in range(s.n_ue)]
            tau_t = np.full((s.n_ue, s.n_bs), np.nan)
            tau_p = np.full((s.n_ue, s.n_bs), np.nan)
            for m, task in enumerate(tasks):
                for n in range(s.n_bs):
                    co_served, ul, dl = self._interferers(m, n, association, active)
                    k = 1 + int(co_served.sum())
                    ttis, ok = self.transmission_latency(m, n, task, rng, self._band(k - 1), ul, dl)
                    if ok:
                        tau_t[m, n] = ttis
                        tau_p[m, n] = compute_latency(task, s.f_max_hz / k)
            cycles = np.array([t.total_cycles for t in tasks])
            return tau_t, tau_p, cycles

        if n_drops <= 0:
            raise ValueError(f"n_drops must be positive, got {n_drops}")
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, range(n_drops)))
        else:
            results = [one(d) for d in range(n_drops)]

        bank = SampleBank(
            tau_t_ttis=np.stack([r[0] for r in results], axis=2),
            tau_p_ms=np.stack([r[1] for r in results], axis=2),
            cycles=np.stack([r[2] for r in results], axis=1),
            tti_ms=s.tti_ms,
            scenario_id=s.scenario_id,
        )
        logger.info(
            f"Probed {s.n_ue}x{s.n_bs} pairs over {n_drops} drops "
            f"(drop rate {bank.drop_rate():.4f})"
        )
        return bank


def reference_plan(s: NetworkScenario) -> AllocationPlan:
    """Nearest-BS association with an equal frequency split; the data-collection plan."""
    bs_of = nearest_association(s)
    counts = np.bincount(bs_of, minlength=s.n_bs)
    freqs = s.f_max_hz / counts[bs_of]
    return AllocationPlan.from_bs_of(bs_of, freqs, s.n_bs)
