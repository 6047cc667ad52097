"""Multilevel Monte Carlo: pilot runs, rate fits, sample allocation, and the
telescoping estimator.

The estimator targets the finest-level mean E[Q_L] by summing independent
per-level correction means: E[Q_L] = E[Q_0] + sum_l E[Q_l - Q_(l-1)].  A
pilot run measures per-level moments; the allocation then minimizes total
declared cost subject to the summed sampling variance staying within
epsilon^2 / 2, which gives counts proportional to sqrt(V_l / C_l).  Pilot
samples are replayed at the start of each level's main run so their cost is
not paid twice.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import stats
from .errors import ConfigError, DataError, DimensionError
from .models import LevelHierarchy, LevelOutput, evaluate_coupled
from .streams import PURPOSE_MAIN_Y, PURPOSE_ORACLE, PURPOSE_PILOT, draw_inputs

# Minimum per-level sample count: variance estimates need at least two
# samples, so plans never drop below this floor.
N_MIN = 2


@dataclass(frozen=True)
class LevelStats:
    """Per-level pilot moments and declared unit costs."""

    level: int
    n_samples: int
    mean_y: float
    var_y: float
    mean_q: float
    var_q: float
    cost_fine: float
    cost_coarse: float
    dofs: int
    output_dim: int
    seconds_fine: float = 0.0
    seconds_coarse: float = 0.0

    @property
    def unit_cost(self) -> float:
        """Declared cost of one coupled sample at this level."""
        return self.cost_fine + self.cost_coarse


@dataclass
class PilotLevel:
    """Cached pilot evaluations for one level (coarse arrays absent at level 0)."""

    level: int
    y: np.ndarray
    qoi_fine: np.ndarray
    q_fine: np.ndarray
    qoi_coarse: np.ndarray | None = None
    q_coarse: np.ndarray | None = None


@dataclass
class PilotRun:
    """Pilot evaluations plus the derived per-level statistics.

    The same input set (purpose ``pilot``, indices 0..n_pilot-1) is applied
    on every level, and the raw outputs are kept so the main runs and the
    reduced-basis construction can reuse them without re-solving.
    """

    master_seed: int
    n_pilot: int
    xi: np.ndarray
    levels: list[PilotLevel]
    stats: list[LevelStats] = field(default_factory=list)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def total_cost(self, hierarchy: LevelHierarchy) -> float:
        return sum(hierarchy.pair_cost(ell) * self.n_pilot for ell in range(self.n_levels))


def _level_stats(
    hierarchy: LevelHierarchy,
    level: int,
    data: PilotLevel,
    seconds_fine: float = 0.0,
    seconds_coarse: float = 0.0,
) -> LevelStats:
    return LevelStats(
        level=level,
        n_samples=data.y.size,
        mean_y=stats.mc_mean(data.y),
        var_y=stats.sample_variance(data.y),
        mean_q=stats.mc_mean(data.qoi_fine),
        var_q=stats.sample_variance(data.qoi_fine),
        cost_fine=hierarchy.cost(level),
        cost_coarse=hierarchy.cost(level - 1) if level > 0 else 0.0,
        dofs=hierarchy.dofs(level),
        output_dim=hierarchy.output_dim(level),
        seconds_fine=seconds_fine,
        seconds_coarse=seconds_coarse,
    )


def pilot_mlmc(hierarchy: LevelHierarchy, n_pilot: int, master_seed: int) -> PilotRun:
    """Evaluate ``n_pilot`` coupled samples on every level and cache everything.

    Level 0 uses plain (single-level) samples.  The pilot shares one input
    set across levels; the main runs use separate per-level streams, so the
    cached samples can be replayed there as the first samples of each level.
    """
    if n_pilot < N_MIN:
        raise ConfigError(f"n_pilot must be at least {N_MIN}, got {n_pilot}")
    xi = draw_inputs(master_seed, PURPOSE_PILOT, 0, 0, n_pilot, hierarchy.distributions)
    levels: list[PilotLevel] = []
    run = PilotRun(master_seed=master_seed, n_pilot=n_pilot, xi=xi, levels=levels)
    for ell in range(hierarchy.n_levels):
        t0 = time.perf_counter()
        if ell == 0:
            out = hierarchy.evaluate(0, xi)
            sec_fine = (time.perf_counter() - t0) / n_pilot
            sec_coarse = 0.0
            data = PilotLevel(level=0, y=out.qoi.copy(), qoi_fine=out.qoi, q_fine=out.q)
        else:
            fine = hierarchy.evaluate(ell, xi)
            t1 = time.perf_counter()
            coarse = hierarchy.evaluate(ell - 1, xi)
            sec_fine = (t1 - t0) / n_pilot
            sec_coarse = (time.perf_counter() - t1) / n_pilot
            data = PilotLevel(
                level=ell,
                y=fine.qoi - coarse.qoi,
                qoi_fine=fine.qoi,
                q_fine=fine.q,
                qoi_coarse=coarse.qoi,
                q_coarse=coarse.q,
            )
        levels.append(data)
        run.stats.append(_level_stats(hierarchy, ell, data, sec_fine, sec_coarse))
    return run


def with_measured_costs(pilot: PilotRun) -> list[LevelStats]:
    """Pilot statistics with declared costs replaced by measured mean wall
    seconds per solve, fine and coarse separately."""
    out = []
    for s in pilot.stats:
        if s.seconds_fine <= 0.0 or (s.level > 0 and s.seconds_coarse <= 0.0):
            raise DataError(
                f"level {s.level} lacks measured timings; re-run the pilot "
                "with measured cost mode"
            )
        out.append(
            replace(s, cost_fine=s.seconds_fine, cost_coarse=s.seconds_coarse)
        )
    return out


@dataclass(frozen=True)
class RateFit:
    """Power-law fits mean|Y| ~ M^-alpha, V[Y] ~ M^-beta, cost ~ M^gamma."""

    alpha: float
    beta: float
    gamma: float
    alpha_levels: tuple[int, ...]
    beta_levels: tuple[int, ...]
    gamma_levels: tuple[int, ...]
    alpha_residual: float
    beta_residual: float
    gamma_residual: float


def _loglog_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    lx = np.log(x)
    ly = np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    return float(slope), float(np.sqrt(np.mean(resid**2)))


def fit_rates(level_stats: list[LevelStats]) -> RateFit:
    """Least-squares slopes on log-log axes.

    Correction levels (ell >= 1) with nonzero mean feed the bias rate and
    with nonzero variance the variance rate; the cost rate uses every
    level's fine-solve cost.  Fewer than two usable points is an error.
    """
    corr = [s for s in level_stats if s.level >= 1]
    a_pts = [(s.dofs, abs(s.mean_y), s.level) for s in corr if abs(s.mean_y) > 0]
    b_pts = [(s.dofs, s.var_y, s.level) for s in corr if s.var_y > 0]
    g_pts = [(s.dofs, s.cost_fine, s.level) for s in level_stats if s.cost_fine > 0]
    if len(a_pts) < 2 or len(b_pts) < 2 or len(g_pts) < 2:
        raise DataError("rate fit needs at least two usable levels per rate")
    sa, ra = _loglog_fit(np.array([p[0] for p in a_pts]), np.array([p[1] for p in a_pts]))
    sb, rb = _loglog_fit(np.array([p[0] for p in b_pts]), np.array([p[1] for p in b_pts]))
    sg, rg = _loglog_fit(np.array([p[0] for p in g_pts]), np.array([p[1] for p in g_pts]))
    return RateFit(
        alpha=-sa,
        beta=-sb,
        gamma=sg,
        alpha_levels=tuple(p[2] for p in a_pts),
        beta_levels=tuple(p[2] for p in b_pts),
        gamma_levels=tuple(p[2] for p in g_pts),
        alpha_residual=ra,
        beta_residual=rb,
        gamma_residual=rg,
    )


def bias_check(level_stats: list[LevelStats], rates: RateFit, epsilon: float) -> dict:
    """Extrapolated remaining discretization bias versus the epsilon budget.

    |mean Y_L| / (s^alpha - 1) estimates |E[Q - Q_L]| under the fitted decay;
    comparing it against epsilon / sqrt(2) flags hierarchies that likely
    need another level.  Advisory only: nothing is changed automatically.
    """
    last = level_stats[-1]
    prev = level_stats[-2]
    s_ratio = last.dofs / prev.dofs
    denom = s_ratio**rates.alpha - 1.0
    estimate = abs(last.mean_y) / denom if denom > 0 else float("inf")
    budget = epsilon / math.sqrt(2.0)
    return {
        "bias_estimate": estimate,
        "bias_budget": budget,
        "bias_warning": bool(estimate > budget),
    }


@dataclass(frozen=True)
class AllocationPlan:
    """Per-level sample counts meeting the epsilon^2 / 2 variance budget.

    ``n_prime`` is present for control-variate plans only and gives the
    per-level auxiliary coarse-sample counts.
    """

    epsilon: float
    n_samples: tuple[int, ...]
    n_prime: tuple[int, ...] | None = None
    degenerate: bool = False

    def sampling_variance(self, variances) -> float:
        return float(sum(v / n for v, n in zip(variances, self.n_samples)))


def _check_epsilon(epsilon: float) -> float:
    if not np.isfinite(epsilon) or epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    return float(epsilon)


def allocate_samples(
    variances, unit_costs, epsilon: float, n_min: int = N_MIN
) -> tuple[tuple[int, ...], bool]:
    """Cost-optimal integer counts for a summed-variance budget epsilon^2 / 2.

    Lagrange stationarity of sum(N_l C_l) + mu * sum(V_l / N_l) gives
    N_l proportional to sqrt(V_l / C_l); the budget pins the constant to
    (2 / epsilon^2) * sum_k sqrt(V_k C_k).  Rounding those values up makes
    the plan feasible but can leave it several samples above the best
    integer plan, so a deterministic refinement walks the excess off: slack
    levels are trimmed down, and single-sample reductions of an expensive
    level are bought by raising cheaper levels whenever that shrinks total
    cost.  The budget constraint is never violated.  Returns
    (counts, degenerate_flag); the flag is set when every variance is zero
    and the floor is the whole answer.
    """
    epsilon = _check_epsilon(epsilon)
    v = np.asarray(variances, dtype=np.float64)
    c = np.asarray(unit_costs, dtype=np.float64)
    if v.shape != c.shape or v.ndim != 1 or v.size == 0:
        raise DimensionError("variances and unit_costs must be matching 1-D arrays")
    if np.any(v < 0) or np.any(c <= 0) or not (np.all(np.isfinite(v)) and np.all(np.isfinite(c))):
        raise DataError("variances must be >= 0 and unit costs > 0")
    total = float(np.sum(np.sqrt(v * c)))
    if total == 0.0:
        return tuple([n_min] * v.size), True
    raw = (2.0 / epsilon**2) * total * np.sqrt(v / c)
    counts = [max(n_min, math.ceil(r)) for r in raw]
    budget = epsilon**2 / 2.0
    _trim_counts(counts, v, c, budget, n_min)
    if max(counts) <= _EXCHANGE_COUNT_CAP:
        for _ in range(_MAX_EXCHANGES):
            if not _exchange_once(counts, v, c, budget, n_min):
                break
            _trim_counts(counts, v, c, budget, n_min)
    return tuple(counts), False


# The exchange polish matters only while single samples are a visible
# fraction of the plan; above this count the ceil + trim plan is already
# optimal to a relative granularity below 1e-5 and the scan is skipped.
_EXCHANGE_COUNT_CAP = 100_000
_MAX_EXCHANGES = 60
_MAX_BUY_STEPS = 200


def _trim_counts(counts, v, c, budget, n_min) -> None:
    """Lower counts in place wherever the budget has slack, most expensive
    level first, jumping each level straight to its lowest feasible value."""
    order = sorted(range(len(counts)), key=lambda k: (-c[k], k))
    changed = True
    while changed:
        changed = False
        for k in order:
            if counts[k] <= n_min:
                continue
            slack = budget - float(np.sum(v / counts))
            if slack <= 0.0:
                continue
            lowest = max(n_min, math.ceil(v[k] / (v[k] / counts[k] + slack)))
            while lowest < counts[k]:
                load = float(np.sum(v / counts)) - v[k] / counts[k] + v[k] / lowest
                if load <= budget:
                    counts[k] = lowest
                    changed = True
                    break
                lowest += 1


def _solo_finish(u, n_cur, v, c, rem):
    """Raise count of level ``u`` alone until it frees ``rem`` of budget;
    returns (new_count, price) or (None, inf) when no finite raise works."""
    denom = v[u] / n_cur[u] - rem
    if denom <= 0.0:
        return None, math.inf
    n_new = math.ceil(v[u] / denom)
    if n_new <= n_cur[u]:
        n_new = n_cur[u] + 1
    return n_new, (n_new - n_cur[u]) * c[u]


def _buy_budget(need, d, counts, v, c):
    """Cheapest raise of levels other than ``d`` freeing ``need`` of budget.

    Expands increments along the best freed-per-cost level while tracking
    the cost of finishing in one jump from every intermediate state, so a
    lumpy final increment does not hide a cheaper mixed raise.
    """
    n_levels = len(counts)
    n_cur = list(counts)
    price, got = 0.0, 0.0
    best_price, best_plan = math.inf, None
    for _ in range(_MAX_BUY_STEPS):
        rem = need - got
        for u in range(n_levels):
            if u == d or v[u] == 0.0:
                continue
            n_new, p = _solo_finish(u, n_cur, v, c, rem)
            if price + p < best_price:
                plan = list(n_cur)
                plan[u] = n_new
                best_price, best_plan = price + p, plan
        best_u, best_eff = -1, 0.0
        for u in range(n_levels):
            if u == d or v[u] == 0.0:
                continue
            eff = (v[u] / n_cur[u] - v[u] / (n_cur[u] + 1)) / c[u]
            if eff > best_eff:
                best_u, best_eff = u, eff
        if best_u < 0:
            break
        got += v[best_u] / n_cur[best_u] - v[best_u] / (n_cur[best_u] + 1)
        n_cur[best_u] += 1
        price += c[best_u]
        if got >= need:
            if price < best_price:
                best_price, best_plan = price, list(n_cur)
            break
        if price >= best_price:
            break
    return best_plan, best_price


_MAX_EXCHANGE_DEPTH = 64


def _exchange_once(counts, v, c, budget, n_min) -> bool:
    """Apply the first cost-reducing exchange: take ``k`` samples off some
    level, paid for by raising other levels within the budget.  Depths up to
    ``_MAX_EXCHANGE_DEPTH`` are scanned because a single-sample reduction can
    be unprofitable while a deeper one is not.  Returns whether a move was
    applied."""
    order = sorted(range(len(counts)), key=lambda k: (-c[k], k))
    load = float(np.sum(v / counts))
    for d in order:
        if counts[d] <= n_min or v[d] == 0.0:
            continue
        best_rate = max(
            (
                (v[u] / counts[u] - v[u] / (counts[u] + 1)) / c[u]
                for u in range(len(counts))
                if u != d and v[u] > 0.0
            ),
            default=0.0,
        )
        if best_rate <= 0.0:
            continue
        depth_cap = min(counts[d] - n_min, _MAX_EXCHANGE_DEPTH)
        for depth in range(1, depth_cap + 1):
            lowered = counts[d] - depth
            need = load - v[d] / counts[d] + v[d] / lowered - budget
            if need <= 0.0:
                continue
            # financing rates only fall as counts rise, so need / best_rate
            # is a lower bound on the price of any raise
            if need / best_rate >= depth * c[d]:
                continue
            plan, price = _buy_budget(need, d, counts, v, c)
            if plan is None:
                break
            if price < depth * c[d]:
                plan[d] = lowered
                if float(np.sum(v / np.asarray(plan, dtype=np.float64))) <= budget:
                    counts[:] = plan
                    return True
    return False


def allocate_mlmc(level_stats: list[LevelStats], epsilon: float, n_min: int = N_MIN) -> AllocationPlan:
    """Standard multilevel plan from pilot variances and declared costs."""
    v = [s.var_y for s in level_stats]
    c = [s.unit_cost for s in level_stats]
    counts, degenerate = allocate_samples(v, c, epsilon, n_min)
    return AllocationPlan(epsilon=_check_epsilon(epsilon), n_samples=counts, degenerate=degenerate)


def mc_cost_reference(finest_stats: LevelStats, epsilon: float) -> float:
    """Cost of plain Monte Carlo on the finest level at the same sampling
    budget: N = ceil(2 V[Q_L] / epsilon^2) fine solves (at least one, so a
    deterministic output prices one evaluation)."""
    epsilon = _check_epsilon(epsilon)
    n = math.ceil(2.0 * finest_stats.var_q / epsilon**2)
    return max(n, 1) * finest_stats.cost_fine


@dataclass(frozen=True)
class LevelEvalCounts:
    """Logged solve counts for one level of a run (pilot solves included)."""

    level: int
    fine_evals: int
    coarse_evals: int
    aux_coarse_evals: int = 0


@dataclass(frozen=True)
class EstimatorResult:
    """Outcome of one estimator run.

    ``level_estimates`` are the per-level correction means whose sum is the
    estimate.  ``sampling_error`` is the planned variance of the estimator,
    computed from the frozen pilot variances and the plan, so it is
    deterministic given the pilot.  ``total_cost`` is recomputed from the
    logged per-level evaluation counts and declared unit costs.
    """

    method: str
    estimate: float
    level_estimates: tuple[float, ...]
    n_samples: tuple[int, ...]
    sampling_error: float
    total_cost: float
    eval_counts: tuple[LevelEvalCounts, ...]
    master_seed: int
    sample_variances: tuple[float, ...] = ()
    zbar_values: tuple[float, ...] = ()

    def cumulative_estimates(self) -> np.ndarray:
        return np.cumsum(self.level_estimates)


def cost_from_counts(hierarchy: LevelHierarchy, counts) -> float:
    """Declared-cost total implied by logged per-level solve counts."""
    total = 0.0
    for c in counts:
        fine = hierarchy.cost(c.level)
        coarse = hierarchy.cost(c.level - 1) if c.level > 0 else 0.0
        total += c.fine_evals * fine + (c.coarse_evals + c.aux_coarse_evals) * coarse
    return total


# Fresh draws are evaluated in fixed-size batches so runs with sample counts
# in the millions keep bounded memory.  Per-sample stream addressing makes the
# drawn inputs independent of the batch split; the fixed size keeps the
# reduction order, and hence the result, reproducible.
_BATCH = 1 << 16


def _fresh_y_batches(
    hierarchy: LevelHierarchy, level: int, fresh_n: int, master_seed: int
):
    """Yield (start, y) batches of fresh correction samples from the level's
    main stream."""
    for start in range(0, fresh_n, _BATCH):
        b = min(_BATCH, fresh_n - start)
        xi = draw_inputs(
            master_seed, PURPOSE_MAIN_Y, level, start, b, hierarchy.distributions
        )
        if level == 0:
            yield start, hierarchy.evaluate(0, xi).qoi
        else:
            fine, coarse = evaluate_coupled(hierarchy, level, xi)
            yield start, fine.qoi - coarse.qoi


def _level_y_moments(
    hierarchy: LevelHierarchy,
    level: int,
    n: int,
    pilot: PilotRun,
    master_seed: int,
) -> tuple[stats.RunningMoments, int]:
    """Moments of n Y samples at one level: replayed pilot samples first,
    then fresh draws from the level's main stream.  Returns
    (moments, fresh_count)."""
    data = pilot.levels[level]
    reused = data.y[: min(n, data.y.size)]
    moments = stats.RunningMoments()
    if reused.size:
        moments.update(reused)
    fresh_n = n - reused.size
    for _, y in _fresh_y_batches(hierarchy, level, fresh_n, master_seed):
        moments.update(y)
    return moments, fresh_n


def run_mlmc(
    hierarchy: LevelHierarchy,
    plan: AllocationPlan,
    pilot: PilotRun,
    master_seed: int | None = None,
) -> EstimatorResult:
    """Telescoping estimate under a plan, replaying cached pilot samples.

    Logged evaluation counts include the pilot solves, so the reported cost
    covers everything actually spent; when every planned count is at least
    the pilot size this equals the plan's nominal cost sum(N_l C_l).
    """
    if len(plan.n_samples) != hierarchy.n_levels:
        raise DimensionError(
            f"plan has {len(plan.n_samples)} levels, hierarchy {hierarchy.n_levels}"
        )
    if pilot.n_levels != hierarchy.n_levels:
        raise DimensionError("pilot and hierarchy level counts differ")
    seed = pilot.master_seed if master_seed is None else master_seed
    level_means: list[float] = []
    level_vars: list[float] = []
    counts: list[LevelEvalCounts] = []
    for ell, n in enumerate(plan.n_samples):
        if n < 1:
            raise ConfigError(f"plan requests {n} samples at level {ell}")
        moments, fresh_n = _level_y_moments(hierarchy, ell, n, pilot, seed)
        level_means.append(moments.mean)
        level_vars.append(moments.variance)
        solves = pilot.n_pilot + fresh_n
        counts.append(
            LevelEvalCounts(
                level=ell,
                fine_evals=solves,
                coarse_evals=solves if ell > 0 else 0,
            )
        )
    sampling_error = plan.sampling_variance([s.var_y for s in pilot.stats])
    return EstimatorResult(
        method="mlmc",
        estimate=float(sum(level_means)),
        level_estimates=tuple(level_means),
        n_samples=plan.n_samples,
        sampling_error=sampling_error,
        total_cost=cost_from_counts(hierarchy, counts),
        eval_counts=tuple(counts),
        master_seed=seed,
        sample_variances=tuple(level_vars),
    )


def run_mc(
    hierarchy: LevelHierarchy,
    epsilon: float,
    pilot: PilotRun,
    master_seed: int | None = None,
) -> EstimatorResult:
    """Plain Monte Carlo on the finest level, sized from the pilot variance.

    Draws fresh finest-level samples (no coupling, no pilot replay) so the
    cost is exactly N fine solves.
    """
    epsilon = _check_epsilon(epsilon)
    seed = pilot.master_seed if master_seed is None else master_seed
    finest = hierarchy.finest_level
    var_q = pilot.stats[finest].var_q
    if var_q <= 0:
        raise DataError("plain MC needs a positive finest-level pilot variance")
    n = max(math.ceil(2.0 * var_q / epsilon**2), N_MIN)
    moments = stats.RunningMoments()
    for start in range(0, n, _BATCH):
        b = min(_BATCH, n - start)
        xi = draw_inputs(
            seed, PURPOSE_MAIN_Y, finest, start, b, hierarchy.distributions
        )
        moments.update(hierarchy.evaluate(finest, xi).qoi)
    counts = (LevelEvalCounts(level=finest, fine_evals=n, coarse_evals=0),)
    return EstimatorResult(
        method="mc",
        estimate=moments.mean,
        level_estimates=(moments.mean,),
        n_samples=(n,),
        sampling_error=var_q / n,
        total_cost=cost_from_counts(hierarchy, counts),
        eval_counts=counts,
        master_seed=seed,
        sample_variances=(moments.variance,),
    )


def mc_oracle_mean(
    hierarchy: LevelHierarchy,
    n: int,
    master_seed: int,
    level: int | None = None,
) -> float:
    """Reference mean from n independent samples on a dedicated stream.

    Used to validate estimators against a large fixed-seed Monte Carlo run;
    the stream purpose is distinct from pilot and main purposes so the
    reference never shares randomness with the estimators under test.
    """
    if n < 1:
        raise ConfigError(f"oracle sample count must be positive, got {n}")
    ell = hierarchy.finest_level if level is None else level
    hierarchy.check_level(ell)
    moments = stats.RunningMoments()
    for start in range(0, n, _BATCH):
        b = min(_BATCH, n - start)
        xi = draw_inputs(
            master_seed, PURPOSE_ORACLE, ell, start, b, hierarchy.distributions
        )
        moments.update(hierarchy.evaluate(ell, xi).qoi)
    return moments.mean
