"""
Data Pipeline Module
====================
Purpose: Turn simulated delay samples into training data for the correlated VAE

Responsibilities:
- Per-BS delay datasets (generation, CSV persistence, train/validation split)
- Compute-trace ingestion (cycles or measured latency per task)
- Sliding windows over one (UE, BS) stream, standardized per channel

Channel 0 is the transmission delay tau_t * T in ms, channel 1 the compute delay tau_p in ms.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.delay_simulator import SAMPLE_COLUMNS, DelaySample, DelaySimulator, SampleBank, SEED_TRAINING
from src.scenario import AllocationPlan, NetworkScenario, TaskModel

logger = logging.getLogger(__name__)

EPS = 1e-6
MIN_WINDOW = 4


class TraceFormatError(ValueError):
    """A compute-trace file does not follow the expected CSV schema."""


# ==========================================
# NORMALIZATION
# ==========================================


@dataclass(frozen=True)
class Normalization:
    """Per-channel mean/std in ms. The std is floored at EPS."""

    mean: Tuple[float, float]
    std: Tuple[float, float]

    @classmethod
    def fit(cls, channels: np.ndarray) -> "Normalization":
        channels = np.asarray(channels, dtype=float).reshape(-1, 2)
        if channels.shape[0] == 0:
            raise ValueError("cannot fit normalization on an empty dataset")
        mean = channels.mean(axis=0)
        std = np.maximum(channels.std(axis=0), EPS)
        return cls((float(mean[0]), float(mean[1])), (float(std[0]), float(std[1])))

    def _stats(self, ndim: int, axis: int) -> Tuple[np.ndarray, np.ndarray]:
        shape = [1] * ndim
        shape[axis] = 2
        return np.asarray(self.mean).reshape(shape), np.asarray(self.std).reshape(shape)

    def standardize(self, values: np.ndarray, axis: int = -1) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        mean, std = self._stats(values.ndim, axis)
        return (values - mean) / std

    def destandardize(self, values: np.ndarray, axis: int = -1) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        mean, std = self._stats(values.ndim, axis)
        return values * std + mean


# ==========================================
# DATASET
# ==========================================


@dataclass
class DelayDataset:
    """Delay records of one scenario, one row per completed task."""

    records: pd.DataFrame
    scenario_id: str
    tti_ms: float
    normalization: Optional[Normalization] = None
    dropped: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=["drop_id", "ue_id", "bs_id"])
    )

    def __post_init__(self):
        missing = [c for c in SAMPLE_COLUMNS if c not in self.records.columns]
        if missing:
            raise ValueError(f"delay records are missing columns: {missing}")
        values = self.records[["tau_t_ttis", "tau_p_ms"]].to_numpy(dtype=float)
        if not np.isfinite(values).all():
            raise ValueError("delay records contain non-finite values")

    def __len__(self) -> int:
        return len(self.records)

    def channels(self) -> np.ndarray:
        """(n, 2) array of [tau_t * T, tau_p] in ms."""
        return np.column_stack(
            [
                self.records["tau_t_ttis"].to_numpy(dtype=float) * self.tti_ms,
                self.records["tau_p_ms"].to_numpy(dtype=float),
            ]
        )

    def samples(self) -> List[DelaySample]:
        return [
            DelaySample(int(r.tau_t_ttis), float(r.tau_p_ms), int(r.ue_id), int(r.bs_id), int(r.drop_id))
            for r in self.records.itertuples(index=False)
        ]

    def e2e_ms(self) -> np.ndarray:
        return self.channels().sum(axis=1)

    def _subset(self, records: pd.DataFrame) -> "DelayDataset":
        return DelayDataset(records.reset_index(drop=True), self.scenario_id, self.tti_ms, self.normalization)

    def for_bs(self, bs_id: int) -> "DelayDataset":
        return self._subset(self.records[self.records["bs_id"] == bs_id])

    def bs_ids(self) -> List[int]:
        return sorted(int(n) for n in self.records["bs_id"].unique())

    def streams(self) -> Dict[Tuple[int, int], pd.DataFrame]:
        """Chronologically ordered records per (UE, BS) pair."""
        ordered = self.records.sort_values(["ue_id", "bs_id", "drop_id"], kind="stable")
        return {
            (int(m), int(n)): group.reset_index(drop=True)
            for (m, n), group in ordered.groupby(["ue_id", "bs_id"], sort=True)
        }

    def fit_normalization(self) -> "DelayDataset":
        fitted = self._subset(self.records)
        fitted.normalization = Normalization.fit(self.channels())
        return fitted

    def split(self, validation_fraction: float, seed: int) -> Tuple["DelayDataset", "DelayDataset"]:
        """
        Disjoint split by drop id. Normalization is fitted on the training part and
        carried over to the validation part.
        """
        if not 0.0 <= validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in [0, 1), got {validation_fraction}")
        drops = np.sort(self.records["drop_id"].unique())
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        n_val = int(round(validation_fraction * len(drops)))
        val_drops = set(rng.permutation(drops)[:n_val].tolist())
        is_val = self.records["drop_id"].isin(val_drops)

        train = self._subset(self.records[~is_val]).fit_normalization()
        val = self._subset(self.records[is_val])
        val.normalization = train.normalization
        return train, val

    # -------------------------
    # Persistence
    # -------------------------
    def to_csv(self, path: str):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.records[SAMPLE_COLUMNS].to_csv(path, index=False, encoding="utf-8", float_format="%.10g")

    @classmethod
    def from_csv(cls, path: str, tti_ms: float) -> "DelayDataset":
        records = pd.read_csv(path, encoding="utf-8")
        if list(records.columns) != SAMPLE_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(SAMPLE_COLUMNS)}")
        scenario_id = str(records["scenario_id"].iloc[0]) if len(records) else "unknown"
        return cls(records, scenario_id, tti_ms)

    @classmethod
    def from_bank(cls, bank: SampleBank) -> "DelayDataset":
        probes, _ = bank.to_frames()
        return cls(probes, bank.scenario_id, bank.tti_ms)


def generate_dataset(
    s: NetworkScenario,
    plan: AllocationPlan,
    task_model: TaskModel,
    n_drops: int,
    seed: int,
    load_floor: Optional[float] = None,
    workers: int = 1,
) -> DelayDataset:
    """Simulate `n_drops` drops of the served UEs; deterministic under `seed`."""
    if len(plan.served_ues()) == 0:
        raise ValueError("plan serves no UE; cannot generate a dataset")
    simulator = DelaySimulator(s, plan, task_model, load_floor=load_floor)
    result = simulator.run(n_drops, seed, namespace=SEED_TRAINING, workers=workers)
    dataset = DelayDataset(result.samples, s.scenario_id, s.tti_ms, dropped=result.dropped)

    if len(dataset) > 1:
        corr = np.corrcoef(dataset.channels().T)[0, 1]
        logger.info(f"Dataset {s.scenario_id}: {len(dataset)} records, corr(tau_t, tau_p) = {corr:.3f}")
    return dataset


# ==========================================
# COMPUTE TRACES
# ==========================================


@dataclass(frozen=True)
class ComputeTrace:
    task_ids: Tuple[str, ...]
    values: Tuple[float, ...]
    kind: str

    def __len__(self) -> int:
        return len(self.values)

    def to_cycles(self, ref_freq_hz: float) -> np.ndarray:
        """Cycles per task; measured latencies are converted at the reference frequency."""
        values = np.asarray(self.values, dtype=float)
        if self.kind == "cycles":
            return values
        return values * 1e-3 * ref_freq_hz


def ingest_compute_trace(path: str) -> ComputeTrace:
    """
    Parse a compute-trace CSV with header `task_id,cycles` or `task_id,latency_ms`.

    Raises TraceFormatError naming the offending line for malformed rows and negative values.
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise TraceFormatError(f"{path}: trace file is empty")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.ParserError as exc:
        raise TraceFormatError(f"{path}: {exc}") from None
    header = [c.strip() for c in frame.columns]
    if len(header) != 2 or header[0] != "task_id" or header[1] not in ("cycles", "latency_ms"):
        raise TraceFormatError(
            f"{path}: line 1: header must be 'task_id,cycles' or 'task_id,latency_ms', got {','.join(header)}"
        )
    kind = header[1]
    if frame.empty:
        raise TraceFormatError(f"{path}: trace has a header but no rows")

    task_ids, values = [], []
    for idx, (task_id, raw) in enumerate(frame.itertuples(index=False, name=None)):
        line = idx + 2
        try:
            value = float(raw)
        except (TypeError, ValueError):
            raise TraceFormatError(f"{path}: line {line}: '{raw}' is not a number") from None
        if not np.isfinite(value):
            raise TraceFormatError(f"{path}: line {line}: value must be finite")
        if value < 0:
            raise TraceFormatError(f"{path}: line {line}: negative {kind} {value}")
        task_ids.append(str(task_id).strip())
        values.append(value)

    logger.info(f"Ingested {len(values)} {kind} entries from {path}")
    return ComputeTrace(tuple(task_ids), tuple(values), kind)


# ==========================================
# WINDOWS
# ==========================================


@dataclass(frozen=True)
class InputWindow:
    values: np.ndarray
    ue_id: int
    bs_id: int
    drop_ids: Tuple[int, ...]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _stream_windows(
    stream: pd.DataFrame, tti_ms: float, width: int, stride: int, normalization: Normalization
) -> List[InputWindow]:
    raw = np.column_stack(
        [stream["tau_t_ttis"].to_numpy(dtype=float) * tti_ms, stream["tau_p_ms"].to_numpy(dtype=float)]
    )
    standardized = normalization.standardize(raw, axis=1)
    drop_ids = stream["drop_id"].to_numpy()
    m, n = int(stream["ue_id"].iloc[0]), int(stream["bs_id"].iloc[0])
    return [
        InputWindow(
            standardized[start : start + width].T.copy(),
            m,
            n,
            tuple(int(d) for d in drop_ids[start : start + width]),
        )
        for start in range(0, len(stream) - width + 1, stride)
    ]


def make_windows(
    d: DelayDataset,
    width: int,
    stride: int,
    normalization: Optional[Normalization] = None,
) -> List[InputWindow]:
    """Sliding windows of `width` records, moved by `stride`, over every (UE, BS) stream."""
    if width < MIN_WINDOW:
        raise ValueError(f"window width must be >= {MIN_WINDOW}, got {width}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if len(d) < width:
        raise ValueError(f"dataset has {len(d)} records, fewer than the window width {width}")
    norm = normalization or d.normalization or Normalization.fit(d.channels())

    windows: List[InputWindow] = []
    for stream in d.streams().values():
        windows.extend(_stream_windows(stream, d.tti_ms, width, stride, norm))
    if not windows:
        raise ValueError(f"no (UE, BS) stream holds {width} records; lower the window width")
    return windows


def latest_windows(
    d: DelayDataset, width: int, normalization: Normalization
) -> Dict[Tuple[int, int], InputWindow]:
    """The most recent full window of every (UE, BS) stream."""
    latest = {}
    for key, stream in d.streams().items():
        if len(stream) >= width:
            latest[key] = _stream_windows(stream.iloc[-width:], d.tti_ms, width, width, normalization)[0]
    return latest


def stack_windows(windows: List[InputWindow]) -> np.ndarray:
    """(batch, 2, W) array."""
    if not windows:
        raise ValueError("no windows to stack")
    return np.stack([w.values for w in windows])


def synthetic_windows(
    n: int,
    width: int,
    rho: float,
    seed: int = 0,
    offset_scale: float = 1.0,
    noise_scale: float = 0.3,
) -> np.ndarray:
    """
    Standardized (n, 2, width) windows with a known channel correlation: each window
    carries a per-window offset pair plus per-step noise pairs, both correlated at rho.
    Used by the self-test and as a controlled training set.
    """
    if not -1.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (-1, 1), got {rho}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    chol = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    offsets = offset_scale * rng.standard_normal((n, 2)) @ chol.T
    noise = noise_scale * rng.standard_normal((n, width, 2)) @ chol.T
    values = (offsets[:, None, :] + noise).transpose(0, 2, 1)
    norm = Normalization.fit(values.transpose(0, 2, 1).reshape(-1, 2))
    return norm.standardize(values, axis=1)
