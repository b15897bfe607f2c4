"""
Task Optimizer Module
=====================
Purpose: Min-max CVaR task assignment and compute-frequency allocation

Pipeline:
1. Cost table: A_t(m, n) = beta * CVaR(tau_t * T) per (UE, BS) pair, A_c(m) = beta * CVaR(c_m)
2. Assignment: bottleneck assignment of UEs to BS capacity slots (or LP relaxation + rounding)
3. Frequencies: closed form f(m, n) = A_c(m) * f_max / sum of A_c over the UEs on BS n
4. Iterate while the compute load changes the assignment costs

Plan objective (ms): max over UEs of A_t(m, n_m) + 1e3 * A_c(m) / f(m, n_m).
With the closed-form frequencies every UE on BS n sees the same compute term
1e3 * sum_{m' on n} A_c(m') / f_max.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from src.correlated_vae import CorrelatedVAE
from src.data_pipeline import InputWindow
from src.delay_simulator import SampleBank
from src.risk import cvar_empirical, cvar_gaussian
from src.scenario import AllocationPlan, NetworkScenario, RiskSpec, validate_plan

logger = logging.getLogger(__name__)

MAX_EXHAUSTIVE = 10**7
CHUNK = 1 << 15
METRICS = ("cvar", "mean", "mean+cvar")


class InfeasibleAssignmentError(ValueError):
    """No assignment serves every UE under the capacity and feasibility limits."""


class InstanceTooLargeError(ValueError):
    """Exhaustive search was asked to enumerate more than MAX_EXHAUSTIVE assignments."""


# ==========================================
# COST TABLES
# ==========================================


@dataclass(frozen=True)
class CostTable:
    """
    transmission[m, n]: risk cost in ms of the transmission delay (inf marks an infeasible pair)
    compute[m]: risk cost in cycles of the task size
    """

    transmission: np.ndarray
    compute: np.ndarray
    label: str = "cvar"

    def __post_init__(self):
        t = np.asarray(self.transmission, dtype=float)
        c = np.asarray(self.compute, dtype=float)
        if t.ndim != 2 or c.shape != (t.shape[0],):
            raise ValueError(f"cost shapes {t.shape} and {c.shape} do not match")
        if (t < 0).any() or np.isnan(t).any():
            raise ValueError("transmission costs must be >= 0 (inf for infeasible pairs)")
        if not np.isfinite(c).all() or (c < 0).any():
            raise ValueError("compute costs must be finite and >= 0")
        object.__setattr__(self, "transmission", t)
        object.__setattr__(self, "compute", c)

    @property
    def n_ue(self) -> int:
        return self.transmission.shape[0]

    @property
    def n_bs(self) -> int:
        return self.transmission.shape[1]

    def scaled(self, factor: float) -> "CostTable":
        return CostTable(self.transmission * factor, self.compute * factor, self.label)

    def __add__(self, other: "CostTable") -> "CostTable":
        return CostTable(
            self.transmission + other.transmission,
            self.compute + other.compute,
            f"{self.label}+{other.label}",
        )


def _risk_cost(samples: np.ndarray, risk: RiskSpec, metric: str) -> float:
    if metric == "mean":
        return float(np.mean(samples))
    cvar = risk.beta * cvar_empirical(samples, risk.alpha)
    if metric == "cvar":
        return cvar
    return float(np.mean(samples)) + cvar


def _gaussian_cost(mean: float, variance: float, risk: RiskSpec, metric: str) -> float:
    if metric == "mean":
        return mean
    cvar = risk.beta * cvar_gaussian(mean, variance, risk.alpha)
    return cvar if metric == "cvar" else mean + cvar


def build_cost_table(
    risk: RiskSpec,
    scenario: NetworkScenario,
    bank: SampleBank,
    models: Optional[Dict[int, CorrelatedVAE]] = None,
    pair_windows: Optional[Dict[Tuple[int, int], InputWindow]] = None,
    metric: str = "cvar",
) -> CostTable:
    """
    Empirical path (default): CVaR of the probed transmission delays of every pair.
    Gaussian path (`models` given): the trained VAE's transmission marginal for each
    pair's latest window, keyed by the serving BS (key -1 is a pooled model).
    Compute costs come from the probed cycles; the Gaussian path moment-matches them.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    M, N = scenario.n_ue, scenario.n_bs
    bank_m, bank_n = bank.shape
    missing = [(m, n) for m in range(M) for n in range(N) if m >= bank_m or n >= bank_n]
    if models is not None:
        pair_windows = pair_windows or {}
        missing += [
            (m, n)
            for m in range(M)
            for n in range(N)
            if (m, n) not in pair_windows or (n not in models and -1 not in models)
        ]
    if missing:
        listed = ", ".join(f"({m},{n})" for m, n in sorted(set(missing))[:20])
        raise ValueError(f"cost table has no data for {len(set(missing))} (UE, BS) pairs: {listed}")

    transmission = np.full((M, N), np.inf)
    compute = np.zeros(M)
    for m in range(M):
        cycles = bank.cycles[m]
        if models is None:
            compute[m] = _risk_cost(cycles, risk, metric)
        else:
            compute[m] = _gaussian_cost(float(np.mean(cycles)), float(np.var(cycles)), risk, metric)
        for n in range(N):
            if models is None:
                samples = bank.transmission_ms(m, n)
                if samples.size:
                    transmission[m, n] = _risk_cost(samples, risk, metric)
            else:
                model = models.get(n, models.get(-1))
                law = model.channel_law(pair_windows[(m, n)], channel=0)
                transmission[m, n] = max(_gaussian_cost(law.mean, law.variance, risk, metric), 0.0)

    infeasible = int(np.isinf(transmission).sum())
    if infeasible:
        logger.warning(f"{infeasible} (UE, BS) pairs never completed a probe; marked infeasible")
    source = "gaussian" if models is not None else "empirical"
    finite = transmission[np.isfinite(transmission)]
    worst = f"{finite.max():.3f} ms" if finite.size else "n/a"
    logger.info(f"Cost table ({metric}, {source}): {M}x{N}, largest finite A_t {worst}")
    return CostTable(transmission, compute, metric)


# ==========================================
# ASSIGNMENT
# ==========================================


def _capacities(capacity: Union[int, Sequence[int]], n_ue: int, n_bs: int) -> np.ndarray:
    caps = np.broadcast_to(np.asarray(capacity, dtype=np.int64), (n_bs,)).copy()
    return np.minimum(caps, n_ue)


def _check_feasible(costs: np.ndarray, caps: np.ndarray):
    M = costs.shape[0]
    if caps.sum() < M:
        raise InfeasibleAssignmentError(
            f"total BS capacity {int(caps.sum())} is smaller than the number of UEs {M}"
        )
    stranded = np.flatnonzero(~np.isfinite(costs).any(axis=1))
    if stranded.size:
        raise InfeasibleAssignmentError(f"UEs {stranded.tolist()} have no feasible BS")


def _slot_owner(caps: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(len(caps)), caps)


def _perfect_matching(allowed: np.ndarray, owner: np.ndarray) -> bool:
    graph = csr_matrix(allowed[:, owner].astype(np.int8))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return bool((match >= 0).all())


def _bottleneck(costs: np.ndarray, caps: np.ndarray) -> np.ndarray:
    owner = _slot_owner(caps)
    levels = np.unique(costs[np.isfinite(costs)])
    lo, hi = 0, len(levels) - 1
    if not _perfect_matching(costs <= levels[hi], owner):
        raise InfeasibleAssignmentError("no capacity-respecting assignment serves every UE")
    while lo < hi:
        mid = (lo + hi) // 2
        if _perfect_matching(costs <= levels[mid], owner):
            hi = mid
        else:
            lo = mid + 1
    threshold = levels[lo]

    # among bottleneck-optimal assignments, take the one with the smallest total cost
    slot_costs = np.where(costs <= threshold, costs, np.inf)[:, owner]
    rows, cols = linear_sum_assignment(slot_costs)
    bs_of = np.full(costs.shape[0], -1, dtype=np.int64)
    bs_of[rows] = owner[cols]
    return bs_of


def _lp_rounded(costs: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Epigraph LP (minimize t) solved with HiGHS, then rounded by fractional mass with capacity repair."""
    M, N = costs.shape
    finite = np.isfinite(costs)
    a = np.where(finite, costs, 0.0)
    n_var = M * N + 1

    c = np.zeros(n_var)
    c[-1] = 1.0
    A_ub, b_ub = [], []
    for m in range(M):
        row = np.zeros(n_var)
        row[m * N : (m + 1) * N] = a[m]
        row[-1] = -1.0
        A_ub.append(row)
        b_ub.append(0.0)
    for n in range(N):
        row = np.zeros(n_var)
        row[n : M * N : N] = 1.0
        A_ub.append(row)
        b_ub.append(float(caps[n]))
    A_eq = np.zeros((M, n_var))
    for m in range(M):
        A_eq[m, m * N : (m + 1) * N] = 1.0
    bounds = [(0.0, 1.0 if finite.ravel()[i] else 0.0) for i in range(M * N)] + [(0.0, None)]

    result = linprog(c, A_ub=np.array(A_ub), b_ub=b_ub, A_eq=A_eq, b_eq=np.ones(M), bounds=bounds, method="highs")
    if not result.success:
        raise InfeasibleAssignmentError(f"LP relaxation failed: {result.message}")
    mass = result.x[: M * N].reshape(M, N)
    logger.debug(f"LP relaxation bound t = {result.x[-1]:.4f}")

    bs_of = np.full(M, -1, dtype=np.int64)
    load = np.zeros(N, dtype=np.int64)
    for m in np.argsort(-mass.max(axis=1), kind="stable"):
        order = np.lexsort((a[m], -mass[m]))
        for n in order:
            if finite[m, n] and load[n] < caps[n]:
                bs_of[m] = n
                load[n] += 1
                break
    if (bs_of < 0).any():
        raise InfeasibleAssignmentError("capacity repair left UEs unassigned")
    return bs_of


def assign_tasks(
    costs: Union[CostTable, np.ndarray],
    capacity: Union[int, Sequence[int]],
    solver: str = "bottleneck",
) -> np.ndarray:
    """
    Serve every UE exactly once while minimizing the largest assignment cost.
    Returns the BS index per UE.
    """
    matrix = costs.transmission if isinstance(costs, CostTable) else np.asarray(costs, dtype=float)
    M, N = matrix.shape
    caps = _capacities(capacity, M, N)
    _check_feasible(matrix, caps)
    if solver == "bottleneck":
        return _bottleneck(matrix, caps)
    if solver == "lp":
        return _lp_rounded(matrix, caps)
    raise ValueError(f"solver must be 'bottleneck' or 'lp', got {solver!r}")


# ==========================================
# FREQUENCY ALLOCATION
# ==========================================


def allocate_frequency(
    bs_of: Sequence[int], compute_costs: Sequence[float], f_max_hz: float, n_bs: int
) -> np.ndarray:
    """
    Per-UE frequency in Hz equalizing A_c(m) / f(m) on every BS:
    f(m) = A_c(m) * f_max / sum of A_c on that BS. Unserved UEs get 0.
    """
    bs_of = np.asarray(bs_of, dtype=np.int64)
    a = np.asarray(compute_costs, dtype=float)
    served = bs_of >= 0
    if (a[served] <= 0).any():
        raise ValueError("compute risk costs of served UEs must be > 0")
    load = np.bincount(bs_of[served], weights=a[served], minlength=n_bs)
    f = np.zeros(len(bs_of))
    f[served] = a[served] * f_max_hz / load[bs_of[served]]
    return f


def bs_loads(bs_of: np.ndarray, compute_costs: np.ndarray, n_bs: int) -> np.ndarray:
    served = bs_of >= 0
    return np.bincount(bs_of[served], weights=compute_costs[served], minlength=n_bs)


def assignment_objective(costs: CostTable, bs_of: np.ndarray, f_max_hz: float) -> float:
    """Plan objective of `bs_of` under the closed-form frequencies."""
    bs_of = np.asarray(bs_of, dtype=np.int64)
    load = bs_loads(bs_of, costs.compute, costs.n_bs)
    m = np.arange(len(bs_of))
    return float(np.max(costs.transmission[m, bs_of] + 1e3 * load[bs_of] / f_max_hz))


def plan_objective(costs: CostTable, plan: AllocationPlan) -> float:
    """max_m A_t(m, n_m) + 1e3 * A_c(m) / f(m, n_m) over the served UEs, in ms."""
    bs_of = plan.bs_of()
    served = np.flatnonzero(bs_of >= 0)
    if served.size == 0:
        return 0.0
    n = bs_of[served]
    f = plan.frequencies[served, n]
    return float(np.max(costs.transmission[served, n] + 1e3 * costs.compute[served] / f))


# ==========================================
# PLANNERS
# ==========================================


@dataclass
class PlannerResult:
    plan: AllocationPlan
    objective: float
    iterations: int
    converged: bool
    method: str = "proposed"
    history: List[float] = field(default_factory=list)

    def diagnostics(self) -> dict:
        bs_of = self.plan.bs_of()
        return {
            "method": self.method,
            "objective_ms": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "history_ms": self.history,
            "ues_per_bs": np.bincount(bs_of[bs_of >= 0], minlength=self.plan.n_bs).tolist(),
        }


def _coupled_costs(costs: CostTable, bs_of: np.ndarray, f_max_hz: float) -> np.ndarray:
    """A_t(m, n) plus the compute term UE m would see after joining BS n."""
    load = bs_loads(bs_of, costs.compute, costs.n_bs)
    own = np.zeros((costs.n_ue, costs.n_bs))
    served = bs_of >= 0
    own[np.flatnonzero(served), bs_of[served]] = costs.compute[served]
    others = load[None, :] - own
    return costs.transmission + 1e3 * (costs.compute[:, None] + others) / f_max_hz


def _refine(costs: CostTable, bs_of: np.ndarray, caps: np.ndarray, f_max_hz: float) -> np.ndarray:
    """Single-UE moves and pairwise swaps that strictly lower the plan objective."""
    bs_of = bs_of.copy()
    best = assignment_objective(costs, bs_of, f_max_hz)
    M, N = costs.n_ue, costs.n_bs
    improved = True
    while improved:
        improved = False
        counts = np.bincount(bs_of, minlength=N)
        for m in range(M):
            for n in range(N):
                if n == bs_of[m] or counts[n] >= caps[n] or not np.isfinite(costs.transmission[m, n]):
                    continue
                trial = bs_of.copy()
                trial[m] = n
                value = assignment_objective(costs, trial, f_max_hz)
                if value < best - 1e-12:
                    bs_of, best, improved = trial, value, True
                    counts = np.bincount(bs_of, minlength=N)
        if improved:
            continue
        for m1 in range(M):
            for m2 in range(m1 + 1, M):
                if bs_of[m1] == bs_of[m2]:
                    continue
                trial = bs_of.copy()
                trial[m1], trial[m2] = bs_of[m2], bs_of[m1]
                value = assignment_objective(costs, trial, f_max_hz)
                if value < best - 1e-12:
                    bs_of, best, improved = trial, value, True
    return bs_of


def _plan_from(costs: CostTable, bs_of: np.ndarray, scenario: NetworkScenario) -> AllocationPlan:
    freqs = allocate_frequency(bs_of, costs.compute, scenario.f_max_hz, scenario.n_bs)
    return AllocationPlan.from_bs_of(bs_of, freqs, scenario.n_bs)


def optimize(
    costs: CostTable,
    scenario: NetworkScenario,
    max_iters: int = 10,
    coupling: str = "compute",
    solver: str = "bottleneck",
    resimulate: Optional[Callable[[np.ndarray], CostTable]] = None,
    refine: bool = True,
    method: str = "proposed",
) -> PlannerResult:
    """
    Alternate assignment and closed-form frequency allocation.

    coupling="none" runs one pass on the transmission costs. "compute" re-assigns on the
    transmission cost plus the compute term implied by the current loads, until the
    assignment repeats. "resimulate" also refreshes the transmission costs through
    `resimulate(bs_of)`. The best plan seen is returned.
    """
    if coupling not in ("none", "compute", "resimulate"):
        raise ValueError(f"coupling must be none, compute or resimulate, got {coupling!r}")
    if coupling == "resimulate" and resimulate is None:
        raise ValueError("coupling='resimulate' needs a resimulate callback")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    f_max = scenario.f_max_hz
    caps = _capacities(scenario.capacity, costs.n_ue, costs.n_bs)

    bs_of = assign_tasks(costs, caps, solver)
    best_bs, best_value = bs_of, assignment_objective(costs, bs_of, f_max)
    history = [best_value]
    iterations, converged = 1, coupling == "none"

    current = costs
    while not converged and iterations < max_iters:
        if coupling == "resimulate":
            current = resimulate(bs_of)
        candidate = assign_tasks(_coupled_costs(current, bs_of, f_max), caps, solver)
        if np.array_equal(candidate, bs_of):
            converged = True
            break
        bs_of = candidate
        iterations += 1
        value = assignment_objective(current, bs_of, f_max)
        history.append(value)
        logger.debug(f"iteration {iterations}: objective {value:.4f} ms")
        if value < best_value:
            best_bs, best_value = bs_of, value
    if not converged:
        # one last look: the final assignment may already be a fixed point
        candidate = assign_tasks(_coupled_costs(current, bs_of, f_max), caps, solver)
        converged = np.array_equal(candidate, bs_of)
    if not converged:
        logger.warning(f"{method}: assignment still changing after {max_iters} iterations; keeping best plan")

    if refine:
        best_bs = _refine(current, best_bs, caps, f_max)
        best_value = assignment_objective(current, best_bs, f_max)

    plan = _plan_from(current, best_bs, scenario)
    violations = validate_plan(plan, scenario)
    if violations:
        raise InfeasibleAssignmentError("; ".join(str(v) for v in violations))
    result = PlannerResult(plan, plan_objective(current, plan), iterations, converged, method, history)
    logger.info(
        f"{method}: objective {result.objective:.3f} ms after {iterations} iteration(s)"
        f"{'' if converged else ' (not converged)'}"
    )
    return result


def _enumerate_chunk(
    start: int, stop: int, costs: CostTable, caps: np.ndarray, f_max_hz: float
) -> Tuple[float, int]:
    M, N = costs.n_ue, costs.n_bs
    codes = np.arange(start, stop, dtype=np.int64)
    # UE 0 is the most significant digit, so code order is lexicographic order of bs_of
    powers = N ** np.arange(M - 1, -1, -1, dtype=np.int64)
    bs_of = (codes[:, None] // powers[None, :]) % N

    onehot = np.zeros((len(codes), M, N))
    np.put_along_axis(onehot, bs_of[:, :, None], 1.0, axis=2)
    counts = onehot.sum(axis=1)
    loads = np.einsum("cmn,m->cn", onehot, costs.compute)
    transmission = costs.transmission[np.arange(M)[None, :], bs_of]
    compute = 1e3 * np.take_along_axis(loads, bs_of, axis=1) / f_max_hz
    value = np.max(transmission + compute, axis=1)
    value[(counts > caps[None, :]).any(axis=1)] = np.inf
    i = int(np.argmin(value))
    return float(value[i]), int(codes[i])


def exhaustive_search(
    scenario: NetworkScenario,
    costs: CostTable,
    workers: int = 1,
) -> PlannerResult:
    """Global min-max plan over every capacity-feasible assignment; ties go to the lexicographically smallest."""
    M, N = costs.n_ue, costs.n_bs
    total = N**M
    if total > MAX_EXHAUSTIVE:
        raise InstanceTooLargeError(
            f"{N}^{M} = {total} assignments exceed the exhaustive limit of {MAX_EXHAUSTIVE}; "
            "use the proposed planner instead"
        )
    caps = _capacities(scenario.capacity, M, N)
    _check_feasible(costs.transmission, caps)
    chunks = [(s, min(s + CHUNK, total)) for s in range(0, total, CHUNK)]

    def run(chunk):
        return _enumerate_chunk(chunk[0], chunk[1], costs, caps, scenario.f_max_hz)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    best_value, best_code = np.inf, -1
    for value, code in results:
        if value < best_value:
            best_value, best_code = value, code
    if not np.isfinite(best_value):
        raise InfeasibleAssignmentError("no feasible assignment exists")

    bs_of = np.array([(best_code // N ** (M - 1 - m)) % N for m in range(M)], dtype=np.int64)
    plan = _plan_from(costs, bs_of, scenario)
    logger.info(f"oracle: objective {best_value:.3f} ms over {total} assignments")
    return PlannerResult(plan, plan_objective(costs, plan), 1, True, "oracle", [best_value])


def baseline_1(scenario: NetworkScenario, mean_costs: CostTable, **options) -> PlannerResult:
    """Minimize the maximum mean delay: the proposed pipeline on E[tau_t * T] and E[c_m]."""
    return optimize(mean_costs, scenario, method="baseline1", **options)


def baseline_2(
    scenario: NetworkScenario, mean_costs: CostTable, risk_costs: CostTable, **options
) -> PlannerResult:
    """Minimize the maximum of E[tau] + beta * CVaR(tau), entry by entry."""
    return optimize(mean_costs + risk_costs, scenario, method="baseline2", **options)
