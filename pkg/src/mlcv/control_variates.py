"""Low-rank control variates for the multilevel estimator.

Each correction level ell >= 1 gets a surrogate correction
Z = Q(q_id) - Q_(l-1), where q_id reconstructs the fine output from the
coarse output through a pair of reduced bases: an interpolative
decomposition picks r pilot columns of the coarse snapshot matrix, the fine
snapshots at the same inputs form the matching fine basis, and a per-sample
least-squares fit transfers coarse coefficients to the fine basis.  Z is
cheap (coarse solves only), so its mean can be pinned down by extra samples
and subtracted:

    W = Y - theta * (Z - Zbar)

with theta chosen from pilot moments.  The level variance drops by the
factor 1 - rho^2 / (1 + Ntilde/Nprime), which is what the allocation uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import stats
from .errors import ConfigError, DataError, DimensionError
from .linalg import LeastSquaresOperator, interpolative_decomposition
from .mlmc import (
    _BATCH,
    N_MIN,
    AllocationPlan,
    EstimatorResult,
    LevelEvalCounts,
    LevelStats,
    PilotRun,
    _check_epsilon,
    _level_y_moments,
    allocate_samples,
    cost_from_counts,
)
from .models import LevelHierarchy, evaluate_coupled
from .streams import PURPOSE_MAIN_Y, PURPOSE_ZBAR, draw_inputs

# Default cap on Nprime / Ntilde: past this, extra mean-pinning samples buy
# almost nothing.
S2_DEFAULT = 10


@dataclass(frozen=True)
class ReducedBasisPair:
    """Coarse/fine snapshot bases at matched pilot inputs for one level.

    ``solver`` carries the factorization of the coarse basis so repeated
    coefficient fits cost one matrix product each.
    """

    level: int
    rank: int
    coarse_basis: np.ndarray
    fine_basis: np.ndarray
    selected_pilot_indices: np.ndarray
    selected_inputs: np.ndarray
    id_residual: float
    solver: LeastSquaresOperator

    @property
    def build_cost_pairs(self) -> int:
        """Pilot sample pairs consumed by the basis (not recyclable)."""
        return self.rank


def build_reduced_basis(
    hierarchy: LevelHierarchy,
    level: int,
    pilot: PilotRun,
    *,
    rank: int | None = None,
    tol: float | None = None,
) -> ReducedBasisPair | None:
    """Select basis columns from the pilot's coarse snapshots at ``level``.

    The fine-basis columns are the pilot's cached fine solves at the selected
    inputs, so no new evaluations happen here; the cost ledger still charges
    the selected pairs to basis construction because they are withheld from
    main-run recycling.  Returns None when tolerance termination finds rank
    0 (every column already below tolerance), in which case the level runs
    without a control variate.
    """
    hierarchy.check_level(level)
    if level < 1:
        raise DimensionError("reduced bases exist for correction levels (level >= 1)")
    data = pilot.levels[level]
    if data.q_coarse is None:
        raise DataError(f"pilot cache for level {level} lacks coarse snapshots")
    idf = interpolative_decomposition(data.q_coarse, rank=rank, tol=tol)
    if idf.rank == 0:
        return None
    sel = np.sort(idf.selected_indices)
    coarse = np.ascontiguousarray(data.q_coarse[:, sel])
    fine = np.ascontiguousarray(data.q_fine[:, sel])
    return ReducedBasisPair(
        level=level,
        rank=idf.rank,
        coarse_basis=coarse,
        fine_basis=fine,
        selected_pilot_indices=sel,
        selected_inputs=pilot.xi[sel].copy(),
        id_residual=idf.residual_norm,
        solver=LeastSquaresOperator(coarse),
    )


def sample_z(
    hierarchy: LevelHierarchy,
    basis: ReducedBasisPair,
    q_coarse: np.ndarray,
    qoi_coarse: np.ndarray | None = None,
) -> np.ndarray:
    """Surrogate corrections Z for coarse output columns.

    Fits each column of ``q_coarse`` in the coarse basis, reconstructs the
    fine output with the fine basis, applies the scalar output map, and
    subtracts the coarse quantity of interest (recomputed here unless
    passed in).
    """
    qc = np.asarray(q_coarse, dtype=np.float64)
    if qc.ndim == 1:
        qc = qc[:, None]
    coeff = basis.solver.solve(qc)
    q_id = basis.fine_basis @ coeff
    qoi_id = hierarchy.qoi(basis.level, q_id)
    if qoi_coarse is None:
        qoi_coarse = hierarchy.qoi(basis.level - 1, qc)
    return qoi_id - np.asarray(qoi_coarse, dtype=np.float64)


def estimate_zbar(
    hierarchy: LevelHierarchy,
    basis: ReducedBasisPair,
    n_prime: int,
    master_seed: int,
) -> float:
    """Mean of ``n_prime`` fresh surrogate corrections.

    Uses the level's dedicated auxiliary stream and only coarse solves, so
    the whole batch costs n_prime coarse evaluations.
    """
    if n_prime < 1:
        raise ConfigError(f"n_prime must be positive, got {n_prime}")
    moments = stats.RunningMoments()
    for start in range(0, n_prime, _BATCH):
        b = min(_BATCH, n_prime - start)
        xi = draw_inputs(
            master_seed, PURPOSE_ZBAR, basis.level, start, b, hierarchy.distributions
        )
        coarse = hierarchy.evaluate(basis.level - 1, xi)
        moments.update(sample_z(hierarchy, basis, coarse.q, coarse.qoi))
    return moments.mean


def theta_star(cov_yz: float, var_z: float, ratio: float) -> float:
    """Variance-optimal control-variate weight.

    With the surrogate mean estimated from Nprime fresh samples, the weight
    that minimizes the combined estimator variance is the regression slope
    cov/var shrunk by 1 / (1 + ratio), ratio = Ntilde / Nprime.
    """
    if not np.isfinite(var_z) or var_z <= 0:
        raise DataError(f"var_z must be positive, got {var_z}")
    if not np.isfinite(ratio) or ratio < 0:
        raise DataError(f"ratio must be finite and non-negative, got {ratio}")
    return (cov_yz / var_z) / (1.0 + ratio)


@dataclass(frozen=True)
class ZbarRule:
    """Sizing rule for the auxiliary mean samples: Nprime = ceil(multiplier *
    Ntilde).  multiplier = 0 disables the control variate on the level."""

    multiplier: float

    @property
    def enabled(self) -> bool:
        return self.multiplier > 0.0

    @property
    def ratio(self) -> float:
        """Planned Ntilde / Nprime."""
        if not self.enabled:
            raise DataError("ratio undefined for a disabled rule")
        return 1.0 / self.multiplier

    def n_prime(self, n_samples: int) -> int:
        if not self.enabled:
            return 0
        return math.ceil(self.multiplier * n_samples)


def allocate_zbar(rho2: float, zeta: float, s2: float = S2_DEFAULT) -> ZbarRule:
    """Cost-optimal auxiliary sizing from the level's correlation and the
    coarse-solve cost fraction zeta = C(Q_(l-1)) / (C(Q_l) + C(Q_(l-1))).

    The unconstrained optimum is multiplier = s1 - 1 with
    s1 = sqrt(rho2 / (zeta (1 - rho2))); it is clamped to [0, s2].  A
    multiplier of 0 (weak correlation relative to the coarse cost) disables
    the control variate for the level.
    """
    if not np.isfinite(rho2) or rho2 < 0 or rho2 > 1:
        raise DataError(f"rho2 must lie in [0, 1], got {rho2}")
    if not np.isfinite(zeta) or zeta <= 0 or zeta > 1:
        raise DataError(f"zeta must lie in (0, 1], got {zeta}")
    if not np.isfinite(s2) or s2 <= 1:
        raise ConfigError(f"s2 must exceed 1, got {s2}")
    if rho2 >= 1.0:
        return ZbarRule(multiplier=float(s2))
    s1 = math.sqrt(rho2 / (zeta * (1.0 - rho2)))
    return ZbarRule(multiplier=float(min(s2, max(0.0, s1 - 1.0))))


@dataclass(frozen=True)
class CVLevelConfig:
    """Frozen per-level control-variate parameters derived from the pilot."""

    level: int
    enabled: bool
    rank: int = 0
    rho2: float = 0.0
    rho2_degenerate: bool = False
    cov_yz: float = 0.0
    var_z: float = 0.0
    multiplier: float = 0.0
    theta: float = 0.0

    @property
    def ratio(self) -> float:
        if not self.enabled:
            raise DataError("ratio undefined for a disabled level")
        return 1.0 / self.multiplier

    @property
    def mse_factor(self) -> float:
        if not self.enabled:
            return 1.0
        return stats.mse_reduction_factor(self.rho2, self.ratio)


@dataclass
class CVSetup:
    """Per-level bases and frozen parameters for the control-variate run."""

    configs: list[CVLevelConfig]
    bases: list[ReducedBasisPair | None]
    pilot_z: list[np.ndarray | None]

    def consumed_pairs(self, level: int) -> int:
        """Pilot pairs withheld from recycling at a level (basis columns of
        enabled levels)."""
        cfg = self.configs[level]
        basis = self.bases[level]
        return basis.rank if (cfg.enabled and basis is not None) else 0


def prepare_control_variates(
    hierarchy: LevelHierarchy,
    pilot: PilotRun,
    *,
    rank=None,
    tol: float | None = None,
    s2: float = S2_DEFAULT,
    force_rho2_zero: bool = False,
) -> CVSetup:
    """Build bases and freeze per-level control-variate parameters.

    ``rank`` may be a single value or one value per correction level;
    alternatively pass ``tol`` for tolerance-terminated basis selection.
    ``force_rho2_zero`` keeps the bases but treats every level as
    uncorrelated, which disables all control variates (degeneration hook).
    """
    n_levels = hierarchy.n_levels
    ranks: list[int | None]
    if rank is not None and tol is not None:
        raise ConfigError("give rank or tol, not both")
    if rank is None and tol is None:
        raise ConfigError("basis termination needed: rank= or tol=")
    if rank is None:
        ranks = [None] * n_levels
    elif np.isscalar(rank):
        ranks = [int(rank)] * n_levels
    else:
        rank = list(rank)
        if len(rank) != n_levels - 1:
            raise DimensionError(
                f"need one rank per correction level ({n_levels - 1}), got {len(rank)}"
            )
        ranks = [None] + [int(r) for r in rank]

    configs: list[CVLevelConfig] = [CVLevelConfig(level=0, enabled=False)]
    bases: list[ReducedBasisPair | None] = [None]
    pilot_z: list[np.ndarray | None] = [None]

    for ell in range(1, n_levels):
        basis = build_reduced_basis(hierarchy, ell, pilot, rank=ranks[ell], tol=tol)
        if basis is None:
            configs.append(CVLevelConfig(level=ell, enabled=False))
            bases.append(None)
            pilot_z.append(None)
            continue
        data = pilot.levels[ell]
        z = sample_z(hierarchy, basis, data.q_coarse, data.qoi_coarse)
        rho2, degenerate = stats.rho_squared(data.y, z)
        if force_rho2_zero:
            rho2, degenerate = 0.0, False
        st = pilot.stats[ell]
        zeta = st.cost_coarse / st.unit_cost
        rule = allocate_zbar(rho2, zeta, s2) if not degenerate else ZbarRule(0.0)
        enabled = rule.enabled and not degenerate
        var_z = stats.sample_variance(z)
        cov = stats.sample_covariance(data.y, z)
        theta = theta_star(cov, var_z, rule.ratio) if enabled and var_z > 0 else 0.0
        configs.append(
            CVLevelConfig(
                level=ell,
                enabled=enabled and var_z > 0,
                rank=basis.rank,
                rho2=rho2,
                rho2_degenerate=degenerate,
                cov_yz=cov,
                var_z=var_z,
                multiplier=rule.multiplier,
                theta=theta,
            )
        )
        bases.append(basis)
        pilot_z.append(z)
    return CVSetup(configs=configs, bases=bases, pilot_z=pilot_z)


def allocate_mlcv(
    level_stats: list[LevelStats],
    configs: list[CVLevelConfig],
    epsilon: float,
    n_min: int = N_MIN,
) -> AllocationPlan:
    """Coupled-sample plan under control variates.

    Each enabled level's variance enters the standard allocation shrunk by
    its reduction factor; the auxiliary counts follow as
    Nprime = ceil(multiplier * Ntilde).
    """
    if len(configs) != len(level_stats):
        raise DimensionError("configs and level_stats must align")
    v_eff = []
    for st, cfg in zip(level_stats, configs):
        v_eff.append(st.var_y * cfg.mse_factor)
    costs = [st.unit_cost for st in level_stats]
    counts, degenerate = allocate_samples(v_eff, costs, epsilon, n_min)
    n_prime = tuple(
        math.ceil(cfg.multiplier * n) if cfg.enabled else 0
        for cfg, n in zip(configs, counts)
    )
    return AllocationPlan(
        epsilon=_check_epsilon(epsilon),
        n_samples=counts,
        n_prime=n_prime,
        degenerate=degenerate,
    )


def _recycle_indices(n_pilot: int, consumed: np.ndarray | None) -> np.ndarray:
    if consumed is None or consumed.size == 0:
        return np.arange(n_pilot)
    mask = np.ones(n_pilot, dtype=bool)
    mask[consumed] = False
    return np.nonzero(mask)[0]


def run_mlcv(
    hierarchy: LevelHierarchy,
    plan: AllocationPlan,
    pilot: PilotRun,
    setup: CVSetup,
    master_seed: int | None = None,
) -> EstimatorResult:
    """Control-variate estimate: sum over levels of mean(Y - theta (Z - Zbar)).

    Per enabled level: the auxiliary mean Zbar comes first from its own
    stream (coarse solves only); the coupled samples then replay the pilot
    pairs not consumed by the basis and top up from the level's main stream.
    Disabled levels (including level 0) fall back to plain correction means
    over the same streams a plain multilevel run would use, replaying all
    pilot samples.
    """
    n_levels = hierarchy.n_levels
    if len(plan.n_samples) != n_levels or pilot.n_levels != n_levels:
        raise DimensionError("plan, pilot, and hierarchy level counts must agree")
    if len(setup.configs) != n_levels:
        raise DimensionError("setup level count does not match hierarchy")
    if plan.n_prime is None:
        raise ConfigError("plan lacks auxiliary counts; use allocate_mlcv")
    seed = pilot.master_seed if master_seed is None else master_seed

    level_means: list[float] = []
    level_vars: list[float] = []
    counts: list[LevelEvalCounts] = []
    zbars: list[float] = []
    error_terms: list[float] = []

    for ell in range(n_levels):
        n = plan.n_samples[ell]
        if n < 1:
            raise ConfigError(f"plan requests {n} samples at level {ell}")
        cfg = setup.configs[ell]
        basis = setup.bases[ell]
        data = pilot.levels[ell]
        st = pilot.stats[ell]

        if ell == 0 or not cfg.enabled or basis is None:
            moments, fresh_n = _level_y_moments(hierarchy, ell, n, pilot, seed)
            solves = pilot.n_pilot + fresh_n
            counts.append(
                LevelEvalCounts(
                    level=ell,
                    fine_evals=solves,
                    coarse_evals=solves if ell > 0 else 0,
                )
            )
            zbars.append(0.0)
            error_terms.append(st.var_y / n)
        else:
            n_prime = plan.n_prime[ell]
            zbar = estimate_zbar(hierarchy, basis, n_prime, seed)
            recyclable = _recycle_indices(pilot.n_pilot, basis.selected_pilot_indices)
            take = recyclable[: min(n, recyclable.size)]
            moments = stats.RunningMoments()
            if take.size:
                w_pilot = data.y[take] - cfg.theta * (setup.pilot_z[ell][take] - zbar)
                moments.update(w_pilot)
            fresh_n = n - take.size
            for start in range(0, fresh_n, _BATCH):
                b = min(_BATCH, fresh_n - start)
                xi = draw_inputs(
                    seed, PURPOSE_MAIN_Y, ell, start, b, hierarchy.distributions
                )
                fine, coarse = evaluate_coupled(hierarchy, ell, xi)
                y_b = fine.qoi - coarse.qoi
                z_b = sample_z(hierarchy, basis, coarse.q, coarse.qoi)
                moments.update(y_b - cfg.theta * (z_b - zbar))
            solves = pilot.n_pilot + fresh_n
            counts.append(
                LevelEvalCounts(
                    level=ell,
                    fine_evals=solves,
                    coarse_evals=solves,
                    aux_coarse_evals=n_prime,
                )
            )
            zbars.append(zbar)
            error_terms.append((st.var_y / n) * cfg.mse_factor)

        level_means.append(moments.mean)
        level_vars.append(moments.variance)

    return EstimatorResult(
        method="mlcv",
        estimate=float(sum(level_means)),
        level_estimates=tuple(level_means),
        n_samples=plan.n_samples,
        sampling_error=float(sum(error_terms)),
        total_cost=cost_from_counts(hierarchy, counts),
        eval_counts=tuple(counts),
        master_seed=seed,
        sample_variances=tuple(level_vars),
        zbar_values=tuple(zbars),
    )


def nominal_mlcv_cost(
    level_stats: list[LevelStats], plan: AllocationPlan, setup: CVSetup
) -> float:
    """Plan-implied cost of a control-variate run: coupled samples plus basis
    pairs at each correction level, plus the auxiliary coarse solves.  Cost
    units follow the given statistics (declared or measured)."""
    if plan.n_prime is None:
        raise ConfigError("plan lacks auxiliary counts; use allocate_mlcv")
    total = plan.n_samples[0] * level_stats[0].unit_cost
    for ell in range(1, len(level_stats)):
        st = level_stats[ell]
        pairs = plan.n_samples[ell] + setup.consumed_pairs(ell)
        total += pairs * st.unit_cost
        total += plan.n_prime[ell] * st.cost_coarse
    return total


def nominal_mlmc_cost(level_stats: list[LevelStats], plan: AllocationPlan) -> float:
    """Plan-implied cost of a plain multilevel run."""
    return sum(
        n * st.unit_cost for st, n in zip(level_stats, plan.n_samples)
    )


def relative_error_curve(level_estimates, reference: float) -> np.ndarray:
    """Relative error of the telescoping prefix sums against a reference."""
    if not np.isfinite(reference) or reference == 0.0:
        raise DataError("reference must be finite and nonzero")
    partial = np.cumsum(np.asarray(level_estimates, dtype=np.float64))
    return np.abs(partial - reference) / abs(reference)
