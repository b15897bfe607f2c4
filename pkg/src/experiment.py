"""
Experiment Module
=================
Purpose: Planning, evaluation and sweeps behind the CLI verbs

Every experiment is a pure function of (config, seed). Evaluation draws its Monte-Carlo
drops from a seed namespace disjoint from training and probing, so the reported delays
never reuse the samples the planner saw.

Figure data (CSV):
- cdf.csv            method,tau_ms,cdf
- fmax_sweep.csv     seed,f_max_ghz,method,mean_delay_ms,cvar_ms
- ue_sweep.csv       seed,n_ue,method,mean_delay_ms,cvar_ms
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.correlated_vae import (
    CorrelatedVAE,
    LatentPosterior,
    PriorSpec,
    ar1_cholesky,
    ar1_cov,
    ar1_det,
    kl_ar1,
)
from src.data_pipeline import DelayDataset, latest_windows
from src.delay_simulator import (
    SEED_EVALUATION,
    DelaySimulator,
    SampleBank,
    reference_plan,
)
from src.risk import cvar_empirical, cvar_gaussian, cvar_rockafellar, var_empirical
from src.scenario import (
    AllocationPlan,
    NetworkScenario,
    RiskEdgeConfig,
    RiskSpec,
    TaskModel,
    build_risk_spec,
    build_scenario,
    build_task_model,
    validate_plan,
)
from src.task_optimizer import (
    CostTable,
    PlannerResult,
    allocate_frequency,
    baseline_1,
    baseline_2,
    build_cost_table,
    exhaustive_search,
    optimize,
)

logger = logging.getLogger(__name__)

METHODS = ("proposed", "baseline1", "baseline2", "oracle")
SWEEP_METHODS = ("proposed", "baseline1", "baseline2")


# ==========================================
# REPORT TYPES
# ==========================================


@dataclass
class MethodMetrics:
    method: str
    mean_delay_ms: float
    var_ms: float
    cvar_ms: float
    drop_rate: float
    n_samples: int
    reliability: Dict[float, float] = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "method": self.method,
            "mean_delay_ms": self.mean_delay_ms,
            "var_ms": self.var_ms,
            "cvar_ms": self.cvar_ms,
            "drop_rate": self.drop_rate,
            "n_samples": self.n_samples,
        }


@dataclass
class ExperimentReport:
    seed: int
    config_hash: str
    alpha: float
    metrics: Dict[str, MethodMetrics] = field(default_factory=dict)
    planner: Dict[str, dict] = field(default_factory=dict)
    durations_s: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "alpha": self.alpha,
            "metrics": {
                name: {**m.row(), "reliability": {str(k): v for k, v in m.reliability.items()}}
                for name, m in self.metrics.items()
            },
            "planner": self.planner,
            "durations_s": self.durations_s,
        }

    def to_json(self, path: str):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([m.row() for m in self.metrics.values()])


# ==========================================
# EVALUATION
# ==========================================


def metrics_from_samples(
    samples: pd.DataFrame,
    tti_ms: float,
    alpha: float,
    tau_grid: Sequence[float],
    method: str,
    n_dropped: int = 0,
) -> MethodMetrics:
    """Report metrics from a persisted sample CSV frame (recomputable without hidden state)."""
    e2e = samples["tau_t_ttis"].to_numpy(dtype=float) * tti_ms + samples["tau_p_ms"].to_numpy(dtype=float)
    if e2e.size == 0:
        raise ValueError(f"{method}: every evaluated task was dropped")
    total = e2e.size + n_dropped
    return MethodMetrics(
        method=method,
        mean_delay_ms=float(e2e.mean()),
        var_ms=var_empirical(e2e, alpha),
        cvar_ms=cvar_empirical(e2e, alpha),
        drop_rate=n_dropped / total,
        n_samples=int(e2e.size),
        reliability={float(t): float(np.mean(e2e < t)) for t in tau_grid},
    )


def evaluate_plan(
    scenario: NetworkScenario,
    plan: AllocationPlan,
    task_model: TaskModel,
    risk: RiskSpec,
    n_drops: int,
    seed: int,
    tau_grid: Sequence[float] = (),
    method: str = "proposed",
    workers: int = 1,
) -> Tuple[MethodMetrics, pd.DataFrame]:
    violations = validate_plan(plan, scenario)
    if violations:
        raise ValueError(f"{method}: infeasible plan: " + "; ".join(str(v) for v in violations))
    simulator = DelaySimulator(scenario, plan, task_model)
    result = simulator.run(n_drops, seed, namespace=SEED_EVALUATION, workers=workers)
    metrics = metrics_from_samples(
        result.samples, scenario.tti_ms, risk.alpha, tau_grid, method, len(result.dropped)
    )
    logger.info(
        f"{method}: mean {metrics.mean_delay_ms:.3f} ms, CVaR {metrics.cvar_ms:.3f} ms, "
        f"drop rate {metrics.drop_rate:.4f}"
    )
    return metrics, result.samples


def cdf_grid(e2e_by_method: Dict[str, np.ndarray], tau_grid: Sequence[float]) -> pd.DataFrame:
    rows = []
    for method, e2e in e2e_by_method.items():
        e2e = np.sort(np.asarray(e2e, dtype=float))
        for tau in tau_grid:
            cdf = np.searchsorted(e2e, tau, side="right") / e2e.size
            rows.append({"method": method, "tau_ms": float(tau), "cdf": float(cdf)})
    return pd.DataFrame(rows, columns=["method", "tau_ms", "cdf"])


# ==========================================
# PLANNING
# ==========================================


def probe(
    scenario: NetworkScenario,
    task_model: TaskModel,
    n_drops: int,
    seed: int,
    reference: Optional[np.ndarray] = None,
    workers: int = 1,
) -> SampleBank:
    simulator = DelaySimulator(scenario, reference_plan(scenario), task_model)
    return simulator.probe_bank(n_drops, seed, reference=reference, workers=workers)


def cost_tables(
    scenario: NetworkScenario,
    risk: RiskSpec,
    bank: SampleBank,
    models: Optional[Dict[int, CorrelatedVAE]] = None,
    pair_windows=None,
) -> Dict[str, CostTable]:
    return {
        metric: build_cost_table(risk, scenario, bank, models, pair_windows, metric=metric)
        for metric in ("cvar", "mean")
    }


def gaussian_inputs(
    models: Dict[int, CorrelatedVAE], bank: SampleBank, width: int
) -> Dict[Tuple[int, int], object]:
    """Latest window of every probed (UE, BS) stream, standardized with that BS's model stats."""
    dataset = DelayDataset.from_bank(bank)
    windows = {}
    for n in range(bank.shape[1]):
        model = models.get(n, models.get(-1))
        if model is None or model.normalization is None:
            continue
        for key, window in latest_windows(dataset.for_bs(n), width, model.normalization).items():
            windows[key] = window
    return windows


def resimulator(
    scenario: NetworkScenario,
    task_model: TaskModel,
    risk: RiskSpec,
    n_drops: int,
    seed: int,
    metric: str,
    workers: int = 1,
) -> Callable[[np.ndarray], CostTable]:
    """Cost refresh for load-coupled planning: re-probe with the candidate association as reference."""

    def refresh(bs_of: np.ndarray) -> CostTable:
        bank = probe(scenario, task_model, n_drops, seed, reference=bs_of, workers=workers)
        return build_cost_table(risk, scenario, bank, metric=metric)

    return refresh


def plan_method(
    method: str,
    scenario: NetworkScenario,
    tables: Dict[str, CostTable],
    max_iters: int = 10,
    coupling: str = "compute",
    solver: str = "bottleneck",
    refresh: Optional[Dict[str, Callable[[np.ndarray], CostTable]]] = None,
    workers: int = 1,
) -> PlannerResult:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if method == "oracle":
        return exhaustive_search(scenario, tables["cvar"], workers=workers)

    refresh = refresh or {}
    options = {"max_iters": max_iters, "coupling": coupling, "solver": solver}
    if method == "proposed":
        return optimize(tables["cvar"], scenario, resimulate=refresh.get("cvar"), **options)
    if method == "baseline1":
        return baseline_1(scenario, tables["mean"], resimulate=refresh.get("mean"), **options)
    summed = refresh.get("mean+cvar")
    return baseline_2(scenario, tables["mean"], tables["cvar"], resimulate=summed, **options)


# ==========================================
# SWEEPS
# ==========================================


def _sweep_rows(
    config: RiskEdgeConfig,
    scenario: NetworkScenario,
    task_model: TaskModel,
    risk: RiskSpec,
    tables: Dict[str, CostTable],
    seed: int,
    methods: Iterable[str],
) -> List[dict]:
    exp = config.experiment
    # sweeps keep the probed transmission costs fixed
    coupling = "compute" if exp.coupling == "resimulate" else exp.coupling
    rows = []
    for method in methods:
        result = plan_method(
            method, scenario, tables, exp.max_iters, coupling, exp.solver, workers=exp.workers
        )
        metrics, _ = evaluate_plan(
            scenario, result.plan, task_model, risk, exp.eval_drops, seed, method=method, workers=exp.workers
        )
        rows.append({"method": method, "mean_delay_ms": metrics.mean_delay_ms, "cvar_ms": metrics.cvar_ms})
    return rows


def sweep_f_max(
    config: RiskEdgeConfig,
    seeds: Sequence[int],
    f_max_ghz: Sequence[float],
    methods: Iterable[str] = SWEEP_METHODS,
) -> pd.DataFrame:
    """Mean and CVaR of the E2E delay versus the per-BS compute frequency."""
    risk = build_risk_spec(config)
    task_model = build_task_model(config)
    rows = []
    for seed in seeds:
        scenario = build_scenario(config, seed)
        # transmission probes and cycles do not depend on f_max
        bank = probe(scenario, task_model, config.experiment.probe_drops, seed, workers=config.experiment.workers)
        tables = cost_tables(scenario, risk, bank)
        for f in f_max_ghz:
            swept = replace(scenario, f_max_hz=float(f) * 1e9)
            for row in _sweep_rows(config, swept, task_model, risk, tables, seed, methods):
                rows.append({"seed": seed, "f_max_ghz": float(f), **row})
    return pd.DataFrame(rows, columns=["seed", "f_max_ghz", "method", "mean_delay_ms", "cvar_ms"])


def sweep_n_ue(
    config: RiskEdgeConfig,
    seeds: Sequence[int],
    ue_counts: Sequence[int],
    methods: Iterable[str] = SWEEP_METHODS,
) -> pd.DataFrame:
    """Mean and CVaR of the E2E delay versus the number of UEs."""
    risk = build_risk_spec(config)
    task_model = build_task_model(config)
    rows = []
    for seed in seeds:
        for n_ue in ue_counts:
            network = config.network.model_copy(update={"n_ue": int(n_ue), "ue_positions": None})
            scenario = build_scenario(config.model_copy(update={"network": network}), seed)
            bank = probe(scenario, task_model, config.experiment.probe_drops, seed, workers=config.experiment.workers)
            tables = cost_tables(scenario, risk, bank)
            for row in _sweep_rows(config, scenario, task_model, risk, tables, seed, methods):
                rows.append({"seed": seed, "n_ue": int(n_ue), **row})
    return pd.DataFrame(rows, columns=["seed", "n_ue", "method", "mean_delay_ms", "cvar_ms"])


# ==========================================
# MANIFEST
# ==========================================


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir: str, files: Sequence[str], config_hash: str, seed: int) -> str:
    """Add `files` (paths inside out_dir) to manifest.json, keeping earlier entries."""
    out = Path(out_dir)
    path = out / "manifest.json"
    manifest = {"config_hash": config_hash, "seed": seed, "files": {}}
    if path.exists():
        previous = json.loads(path.read_text(encoding="utf-8"))
        if previous.get("config_hash") == config_hash and previous.get("seed") == seed:
            manifest["files"] = previous.get("files", {})
    for name in files:
        target = out / name
        manifest["files"][name] = {"sha256": file_sha256(str(target)), "bytes": target.stat().st_size}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return str(path)


# ==========================================
# SELF TEST
# ==========================================


def run_selftest(seed: int = 0) -> List[Tuple[str, bool, str]]:
    """Fast numeric checks of the closed forms against direct computation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9]))
    checks: List[Tuple[str, bool, str]] = []

    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 7))
        rho, s = rng.uniform(-0.95, 0.95), rng.uniform(0.1, 5.0)
        lu = np.linalg.det(ar1_cov(rho, s, d))
        worst = max(worst, abs(ar1_det(rho, s, d) - lu) / abs(lu))
    checks.append(("determinant identity", worst < 1e-10, f"max rel err {worst:.2e}"))

    chol = ar1_cholesky(0.5, 2.0, 2)
    residual = float(np.max(np.abs(chol @ chol.T - ar1_cov(0.5, 2.0, 2))))
    checks.append(("cholesky reconstruction", residual < 1e-10, f"residual {residual:.2e}"))

    post = LatentPosterior(np.array([0.5, -0.3]), 1.5, 0.6)
    prior = PriorSpec()
    z = post.mu + rng.standard_normal((200_000, 2)) @ ar1_cholesky(post.rho, post.scale, 2).T
    cov = post.cov
    inv = np.linalg.inv(cov)
    log_q = -0.5 * np.einsum("ni,ij,nj->n", z - post.mu, inv, z - post.mu) - 0.5 * np.log(np.linalg.det(cov))
    log_p = -0.5 * np.sum(z**2, axis=1)
    mc = float(np.mean(log_q - log_p))
    closed = kl_ar1(post, prior)
    checks.append(("KL closed form vs Monte Carlo", abs(mc - closed) / closed < 0.02, f"{closed:.4f} vs {mc:.4f}"))

    values = np.arange(1, 101, dtype=float)
    cvar = cvar_empirical(values, 0.1)
    rock, t = cvar_rockafellar(values, 0.1)
    exact = abs(cvar - 95.5) < 1e-9 and abs(rock - 95.5) < 1e-9 and t == 90.0
    checks.append(("empirical CVaR oracle", exact, f"{cvar}, {rock} at {t}"))
    gauss = cvar_gaussian(0.0, 1.0, 0.05)
    checks.append(("Gaussian CVaR oracle", abs(gauss - 2.0627) / 2.0627 < 5e-3, f"{gauss:.4f}"))

    f = allocate_frequency([0, 0], [1.0, 3.0], 4e9, 1)
    checks.append(("frequency closed form", np.allclose(f, [1e9, 3e9]), f"{(f / 1e9).tolist()} GHz"))

    for name, ok, detail in checks:
        (logger.info if ok else logger.error)(f"selftest {name}: {'ok' if ok else 'FAILED'} ({detail})")
    return checks
