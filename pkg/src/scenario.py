"""
Scenario Core Module
====================
Purpose: Domain types shared by the delay simulator, the correlated VAE and the planner.

Contents:
- NetworkScenario: base stations, UEs, radio and compute parameters
- TaskSpec / TaskModel: per-UE task sizes and the distribution that draws them
- RiskSpec: tail level alpha, CVaR weight beta, delay threshold tau_th
- AllocationPlan: binary assignment v(m,n) plus compute frequency f(m,n)
- Configuration sections (YAML, validated with pydantic) and scenario text round-trip

Units: scenario fields carry their unit in the name (mW, Hz, ms, dBm/Hz). The config file
also accepts the usual radio units (MHz, GHz, dB) and converts them at the boundary.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

Position = Tuple[float, float]


class ScenarioError(ValueError):
    """Raised when a scenario is used while it still violates its invariants."""

    def __init__(self, violations: List["Violation"]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


class PlanShapeError(ValueError):
    """Allocation matrices do not match the scenario dimensions."""


# ==========================================
# DOMAIN TYPES
# ==========================================


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


@dataclass(frozen=True)
class NetworkScenario:
    """
    Static description of a MEC network: N base stations with edge servers and M UEs.

    Positions are in meters. `per_bs_capacity=None` means every BS may serve all M UEs.
    """

    n_bs: int
    n_ue: int
    bs_positions: Tuple[Position, ...]
    ue_positions: Tuple[Position, ...]
    tti_ms: float = 1.0
    bandwidth_hz: float = 20e6
    p_bs_mw: float = 100.0
    p_ue_mw: float = 10.0
    gain_bs: float = 1.0
    gain_ue: float = 1.0
    noise_psd_dbm_hz: float = -174.0
    f_max_hz: float = 20e9
    pathloss_exponent: float = 3.5
    pathloss_ref_db: float = 38.0
    max_retx: int = 8
    sinr_decode_threshold: float = 1.0
    per_bs_capacity: Optional[int] = None
    activity_factor: float = 1.0
    bandwidth_sharing: str = "equal"
    scenario_id: str = "desk"

    @property
    def capacity(self) -> int:
        return self.n_ue if self.per_bs_capacity is None else self.per_bs_capacity

    @property
    def bs_xy(self) -> np.ndarray:
        return np.asarray(self.bs_positions, dtype=float).reshape(-1, 2)

    @property
    def ue_xy(self) -> np.ndarray:
        return np.asarray(self.ue_positions, dtype=float).reshape(-1, 2)

    @property
    def noise_psd_mw_hz(self) -> float:
        return 10.0 ** (self.noise_psd_dbm_hz / 10.0)

    @property
    def tti_s(self) -> float:
        return self.tti_ms * 1e-3


@dataclass(frozen=True)
class TaskSpec:
    """One offloaded task. total_cycles is always cycles_per_bit * uplink_bits."""

    ue_id: int
    uplink_bits: float
    downlink_bits: float
    cycles_per_bit: float

    def __post_init__(self):
        if not (self.uplink_bits > 0 and self.downlink_bits > 0):
            raise ValueError(
                f"task for UE {self.ue_id}: packet sizes must be positive "
                f"(I_u={self.uplink_bits}, I_d={self.downlink_bits})"
            )
        if not self.cycles_per_bit >= 0:
            raise ValueError(f"task for UE {self.ue_id}: cycles_per_bit must be >= 0")

    @property
    def total_cycles(self) -> float:
        return self.cycles_per_bit * self.uplink_bits

    @classmethod
    def from_cycles(
        cls, ue_id: int, uplink_bits: float, downlink_bits: float, cycles: float
    ) -> "TaskSpec":
        return cls(ue_id, uplink_bits, downlink_bits, cycles / uplink_bits)


@dataclass(frozen=True)
class TaskModel:
    """
    Generator of tasks: uniform packet sizes and lognormal compute cycles.
    A non-empty `cycles_trace` replaces the lognormal (resampled with replacement).
    """

    packet_bits_min: float = 1e3
    packet_bits_max: float = 1e4
    cycles_median: float = 5e7
    cycles_sigma: float = 0.5
    cycles_trace: Optional[Tuple[float, ...]] = None

    def draw(self, ue_id: int, rng: np.random.Generator) -> TaskSpec:
        uplink = rng.uniform(self.packet_bits_min, self.packet_bits_max)
        downlink = rng.uniform(self.packet_bits_min, self.packet_bits_max)
        if self.cycles_trace:
            cycles = self.cycles_trace[int(rng.integers(len(self.cycles_trace)))]
        else:
            cycles = rng.lognormal(math.log(self.cycles_median), self.cycles_sigma)
        return TaskSpec.from_cycles(ue_id, uplink, downlink, float(cycles))

    def with_trace(self, cycles: Sequence[float]) -> "TaskModel":
        return TaskModel(
            self.packet_bits_min,
            self.packet_bits_max,
            self.cycles_median,
            self.cycles_sigma,
            tuple(float(c) for c in cycles),
        )


@dataclass(frozen=True)
class RiskSpec:
    alpha: float = 0.05
    beta: float = 0.5
    tau_th_ms: float = 30.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.tau_th_ms > 0.0:
            raise ValueError(f"tau_th_ms must be > 0, got {self.tau_th_ms}")


@dataclass(frozen=True, eq=False)
class AllocationPlan:
    """
    assignment[m, n] = 1 iff UE m is served by BS n; frequencies[m, n] in Hz.
    Arrays are frozen (read-only) after construction.
    """

    assignment: np.ndarray
    frequencies: np.ndarray

    def __post_init__(self):
        raw = np.array(self.assignment, dtype=float)
        if not np.array_equal(raw, np.round(raw)):
            raise ValueError("assignment entries must be integral (0 or 1)")
        assignment = raw.astype(np.int64)
        frequencies = np.array(self.frequencies, dtype=float)
        if assignment.ndim != 2 or assignment.shape != frequencies.shape:
            raise PlanShapeError(
                f"assignment {assignment.shape} and frequencies {frequencies.shape} "
                "must be matrices of the same shape"
            )
        assignment.setflags(write=False)
        frequencies.setflags(write=False)
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "frequencies", frequencies)

    @property
    def n_ue(self) -> int:
        return self.assignment.shape[0]

    @property
    def n_bs(self) -> int:
        return self.assignment.shape[1]

    @classmethod
    def empty(cls, n_ue: int, n_bs: int) -> "AllocationPlan":
        return cls(np.zeros((n_ue, n_bs), dtype=np.int64), np.zeros((n_ue, n_bs)))

    @classmethod
    def from_bs_of(
        cls, bs_of: Sequence[int], frequencies_hz: Sequence[float], n_bs: int
    ) -> "AllocationPlan":
        """Build a plan from a per-UE BS index (-1 = unserved) and per-UE frequency."""
        bs_of = np.asarray(bs_of, dtype=np.int64)
        assignment = np.zeros((len(bs_of), n_bs), dtype=np.int64)
        frequencies = np.zeros((len(bs_of), n_bs))
        for m, n in enumerate(bs_of):
            if n >= 0:
                assignment[m, n] = 1
                frequencies[m, n] = frequencies_hz[m]
        return cls(assignment, frequencies)

    def bs_of(self) -> np.ndarray:
        """Serving BS per UE, -1 for unserved UEs."""
        served = self.assignment.sum(axis=1) > 0
        return np.where(served, self.assignment.argmax(axis=1), -1)

    def served_ues(self) -> np.ndarray:
        return np.flatnonzero(self.assignment.sum(axis=1) > 0)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for m, n in enumerate(self.bs_of()):
            if n >= 0:
                rows.append({"ue_id": m, "bs_id": int(n), "f_hz": float(self.frequencies[m, n])})
        return pd.DataFrame(rows, columns=["ue_id", "bs_id", "f_hz"])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, n_ue: int, n_bs: int) -> "AllocationPlan":
        assignment = np.zeros((n_ue, n_bs), dtype=np.int64)
        frequencies = np.zeros((n_ue, n_bs))
        for row in frame.itertuples(index=False):
            if not (0 <= int(row.ue_id) < n_ue and 0 <= int(row.bs_id) < n_bs):
                raise PlanShapeError(
                    f"plan row (ue {row.ue_id}, bs {row.bs_id}) is outside a {n_ue}x{n_bs} scenario"
                )
            assignment[int(row.ue_id), int(row.bs_id)] = 1
            frequencies[int(row.ue_id), int(row.bs_id)] = float(row.f_hz)
        return cls(assignment, frequencies)


# ==========================================
# VALIDATION
# ==========================================


def validate_scenario(s: NetworkScenario) -> List[Violation]:
    """Return every violated scenario invariant. An empty list means the scenario is valid."""
    violations: List[Violation] = []

    def require(ok: bool, name: str, rule: str):
        if not ok:
            violations.append(Violation(name, rule))

    require(s.n_bs >= 1, "n_bs", "n_bs ≥ 1")
    require(s.n_ue >= 1, "n_ue", "n_ue ≥ 1")
    require(len(s.bs_positions) == s.n_bs, "bs_positions", "one position per BS")
    require(len(s.ue_positions) == s.n_ue, "ue_positions", "one position per UE")
    coords = [c for p in (*s.bs_positions, *s.ue_positions) for c in p]
    require(all(math.isfinite(c) for c in coords), "positions", "positions finite")
    require(s.tti_ms > 0, "tti_ms", "tti_ms > 0")
    require(s.bandwidth_hz > 0, "bandwidth_hz", "bandwidth > 0")
    require(s.p_bs_mw > 0, "p_bs_mw", "P_n > 0")
    require(s.p_ue_mw > 0, "p_ue_mw", "P_m > 0")
    require(s.gain_bs > 0, "gain_bs", "G_n > 0")
    require(s.gain_ue > 0, "gain_ue", "G_m > 0")
    require(s.f_max_hz > 0, "f_max_hz", "f_max > 0")
    require(math.isfinite(s.noise_psd_dbm_hz), "noise_psd_dbm_hz", "N_0 finite")
    require(s.pathloss_exponent > 0, "pathloss_exponent", "pathloss_exponent > 0")
    require(math.isfinite(s.pathloss_ref_db), "pathloss_ref_db", "pathloss_ref_db finite")
    require(s.max_retx >= 0, "max_retx", "max_retx ≥ 0")
    require(s.sinr_decode_threshold >= 0, "sinr_decode_threshold", "threshold ≥ 0")
    require(
        s.per_bs_capacity is None or s.per_bs_capacity >= 1,
        "per_bs_capacity",
        "per_bs_capacity ≥ 1",
    )
    require(0.0 <= s.activity_factor <= 1.0, "activity_factor", "0 ≤ activity_factor ≤ 1")
    require(
        s.bandwidth_sharing in ("equal", "full"),
        "bandwidth_sharing",
        "bandwidth_sharing in {equal, full}",
    )
    return violations


def require_valid(s: NetworkScenario) -> NetworkScenario:
    violations = validate_scenario(s)
    if violations:
        raise ScenarioError(violations)
    return s


def validate_plan(p: AllocationPlan, s: NetworkScenario, rtol: float = 1e-9) -> List[Violation]:
    """
    Check an allocation plan against the scenario limits.
    Per-BS frequency sums may reach f_max exactly; `rtol` absorbs float summation error.
    """
    if p.assignment.shape != (s.n_ue, s.n_bs):
        raise PlanShapeError(
            f"plan shape {p.assignment.shape} does not match (M, N) = ({s.n_ue}, {s.n_bs})"
        )
    violations: List[Violation] = []
    v, f = p.assignment, p.frequencies

    if not np.isin(v, (0, 1)).all():
        violations.append(Violation("assignment", "v(m,n) ∈ {0, 1}"))
    if not np.isfinite(f).all() or (f < 0).any():
        violations.append(Violation("frequencies", "f(m,n) finite and ≥ 0"))

    for m in np.flatnonzero(v.sum(axis=1) > 1):
        violations.append(Violation("assignment", f"UE {m}: Σ_n v(m,n) ≤ 1"))
    for n in np.flatnonzero(v.sum(axis=0) > s.capacity):
        violations.append(Violation("assignment", f"BS {n}: Σ_m v(m,n) ≤ {s.capacity}"))
    for n in np.flatnonzero(f.sum(axis=0) > s.f_max_hz * (1.0 + rtol)):
        violations.append(Violation("frequencies", f"BS {n}: Σ_m f(m,n) ≤ f_max"))
    for m, n in zip(*np.nonzero((v == 1) & ~(f > 0))):
        violations.append(Violation("frequencies", f"UE {m} on BS {n}: f(m,n) > 0"))
    for m, n in zip(*np.nonzero((v == 0) & (f != 0))):
        violations.append(Violation("frequencies", f"UE {m} on BS {n}: f(m,n) = 0 when unassigned"))
    return violations


# ==========================================
# CONFIGURATION SECTIONS
# ==========================================


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _one_of(section: BaseModel, first: str, second: str):
    if getattr(section, first) is not None and getattr(section, second) is not None:
        raise ValueError(f"give either {first} or {second}, not both")


class NetworkSection(_Section):
    scenario_id: str = "desk"
    n_bs: int = 4
    n_ue: int = 16
    cell_size_m: float = 200.0
    bs_positions: Optional[List[Tuple[float, float]]] = None
    ue_positions: Optional[List[Tuple[float, float]]] = None
    per_bs_capacity: Optional[int] = None


class RadioSection(_Section):
    tti_ms: float = 1.0
    bandwidth_hz: Optional[float] = None
    bandwidth_mhz: Optional[float] = None
    p_bs_mw: float = 100.0
    p_ue_mw: float = 10.0
    gain_bs: float = 1.0
    gain_ue: float = 1.0
    noise_psd_dbm_hz: float = -174.0
    pathloss_exponent: float = 3.5
    pathloss_ref_db: float = 38.0
    max_retx: int = 8
    sinr_decode_threshold: Optional[float] = None
    sinr_decode_threshold_db: Optional[float] = None
    activity_factor: float = 1.0
    bandwidth_sharing: str = "equal"

    @model_validator(mode="after")
    def _single_units(self):
        _one_of(self, "bandwidth_hz", "bandwidth_mhz")
        _one_of(self, "sinr_decode_threshold", "sinr_decode_threshold_db")
        return self

    def resolved_bandwidth_hz(self) -> float:
        if self.bandwidth_hz is not None:
            return self.bandwidth_hz
        return (20.0 if self.bandwidth_mhz is None else self.bandwidth_mhz) * 1e6

    def resolved_threshold(self) -> float:
        if self.sinr_decode_threshold is not None:
            return self.sinr_decode_threshold
        db = 0.0 if self.sinr_decode_threshold_db is None else self.sinr_decode_threshold_db
        return 10.0 ** (db / 10.0)


class ComputeSection(_Section):
    f_max_hz: Optional[float] = None
    f_max_ghz: Optional[float] = None
    packet_kbits_min: float = 1.0
    packet_kbits_max: float = 10.0
    cycles_median: float = 5e7
    cycles_sigma: float = 0.5
    trace_path: Optional[str] = None
    trace_ref_freq_ghz: float = 5.0

    @model_validator(mode="after")
    def _single_units(self):
        _one_of(self, "f_max_hz", "f_max_ghz")
        return self

    def resolved_f_max_hz(self) -> float:
        if self.f_max_hz is not None:
            return self.f_max_hz
        return (20.0 if self.f_max_ghz is None else self.f_max_ghz) * 1e9


class RiskSection(_Section):
    alpha: float = 0.05
    beta: float = 0.5
    tau_th_ms: float = 30.0


class TrainingSection(_Section):
    data_source: str = "probe"
    window: int = 16
    stride: int = 8
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    grad_clip: Optional[float] = 5.0
    l_samples_train: int = 1
    l_samples_eval: int = 64
    prior_mu: float = 0.0
    prior_sigma: float = 1.0
    latent_target_weight: float = 1.0
    posterior: str = "ar1"
    conv_channels: int = 8
    kernel_size: int = 3
    hidden_units: int = 16
    pooled: bool = False
    validation_fraction: float = 0.2
    mixed_load: bool = True
    load_floor: float = 0.3


class ExperimentSection(_Section):
    n_drops: int = 2000
    probe_drops: int = 400
    eval_drops: int = 2000
    max_iters: int = 10
    cost_source: str = "empirical"
    coupling: str = "compute"
    solver: str = "bottleneck"
    workers: int = 1
    seeds: int = 5
    tau_grid_ms: List[float] = Field(default_factory=lambda: [float(t) for t in range(5, 105, 5)])
    f_max_sweep_ghz: List[float] = Field(default_factory=lambda: [5.0, 10.0, 20.0, 40.0, 80.0, 1000.0])
    ue_sweep: List[int] = Field(default_factory=lambda: [8, 12, 16, 20, 24])
    log_path: str = "logs/riskedge.log"
    output_dir: str = "data/output"


class RiskEdgeConfig(_Section):
    network: NetworkSection = Field(default_factory=NetworkSection)
    radio: RadioSection = Field(default_factory=RadioSection)
    compute: ComputeSection = Field(default_factory=ComputeSection)
    risk: RiskSection = Field(default_factory=RiskSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)


# ==========================================
# BUILDERS
# ==========================================


def grid_layout(
    n_bs: int, n_ue: int, cell_size_m: float, rng: np.random.Generator
) -> Tuple[Tuple[Position, ...], Tuple[Position, ...]]:
    """BSs at the centers of a square grid of cells; UEs uniform over the covered area."""
    cols = max(1, math.ceil(math.sqrt(max(n_bs, 1))))
    rows = max(1, math.ceil(max(n_bs, 1) / cols))
    bs = tuple(
        (float((n % cols + 0.5) * cell_size_m), float((n // cols + 0.5) * cell_size_m))
        for n in range(n_bs)
    )
    xs = rng.uniform(0.0, cols * cell_size_m, size=n_ue)
    ys = rng.uniform(0.0, rows * cell_size_m, size=n_ue)
    ue = tuple((float(x), float(y)) for x, y in zip(xs, ys))
    return bs, ue


def build_scenario(config: RiskEdgeConfig, seed: int = 0) -> NetworkScenario:
    net, radio, compute = config.network, config.radio, config.compute
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    bs_positions, ue_positions = grid_layout(net.n_bs, net.n_ue, net.cell_size_m, rng)
    if net.bs_positions is not None:
        bs_positions = tuple((float(x), float(y)) for x, y in net.bs_positions)
    if net.ue_positions is not None:
        ue_positions = tuple((float(x), float(y)) for x, y in net.ue_positions)

    return NetworkScenario(
        n_bs=net.n_bs,
        n_ue=net.n_ue,
        bs_positions=bs_positions,
        ue_positions=ue_positions,
        tti_ms=radio.tti_ms,
        bandwidth_hz=radio.resolved_bandwidth_hz(),
        p_bs_mw=radio.p_bs_mw,
        p_ue_mw=radio.p_ue_mw,
        gain_bs=radio.gain_bs,
        gain_ue=radio.gain_ue,
        noise_psd_dbm_hz=radio.noise_psd_dbm_hz,
        f_max_hz=compute.resolved_f_max_hz(),
        pathloss_exponent=radio.pathloss_exponent,
        pathloss_ref_db=radio.pathloss_ref_db,
        max_retx=radio.max_retx,
        sinr_decode_threshold=radio.resolved_threshold(),
        per_bs_capacity=net.per_bs_capacity,
        activity_factor=radio.activity_factor,
        bandwidth_sharing=radio.bandwidth_sharing,
        scenario_id=net.scenario_id,
    )


def build_task_model(config: RiskEdgeConfig) -> TaskModel:
    compute = config.compute
    return TaskModel(
        packet_bits_min=compute.packet_kbits_min * 1e3,
        packet_bits_max=compute.packet_kbits_max * 1e3,
        cycles_median=compute.cycles_median,
        cycles_sigma=compute.cycles_sigma,
    )


def build_risk_spec(config: RiskEdgeConfig) -> RiskSpec:
    return RiskSpec(config.risk.alpha, config.risk.beta, config.risk.tau_th_ms)


# ==========================================
# TEXT ROUND-TRIP
# ==========================================


def dump_scenario(s: NetworkScenario) -> str:
    """Serialize a scenario as config text using the scenario's own field names."""
    document: Dict[str, Dict] = {
        "network": {
            "scenario_id": s.scenario_id,
            "n_bs": s.n_bs,
            "n_ue": s.n_ue,
            "bs_positions": [[float(x), float(y)] for x, y in s.bs_positions],
            "ue_positions": [[float(x), float(y)] for x, y in s.ue_positions],
            "per_bs_capacity": s.per_bs_capacity,
        },
        "radio": {
            "tti_ms": float(s.tti_ms),
            "bandwidth_hz": float(s.bandwidth_hz),
            "p_bs_mw": float(s.p_bs_mw),
            "p_ue_mw": float(s.p_ue_mw),
            "gain_bs": float(s.gain_bs),
            "gain_ue": float(s.gain_ue),
            "noise_psd_dbm_hz": float(s.noise_psd_dbm_hz),
            "pathloss_exponent": float(s.pathloss_exponent),
            "pathloss_ref_db": float(s.pathloss_ref_db),
            "max_retx": int(s.max_retx),
            "sinr_decode_threshold": float(s.sinr_decode_threshold),
            "activity_factor": float(s.activity_factor),
            "bandwidth_sharing": s.bandwidth_sharing,
        },
        "compute": {"f_max_hz": float(s.f_max_hz)},
    }
    return yaml.safe_dump(document, sort_keys=False)


def load_scenario(text: str) -> NetworkScenario:
    config = RiskEdgeConfig.model_validate(yaml.safe_load(text) or {})
    return build_scenario(config)
