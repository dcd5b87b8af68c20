# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Monte Carlo estimators for the expansion of the homogenized coefficient in p.

Every estimator draws `N` realizations of the point process in the box, evaluates
a per-realization functional with its own `RealizationContext`, and reduces the
samples in realization order. Spatial averages over the whole periodic box stand
in for the expectation of the cube average.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from multiprocessing.pool import ThreadPool
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from corrector_solver import FaceRule, SolverParams
from difference_calculus import (
    DEFAULT_CACHE_CELLS,
    DEFAULT_SUBSET_CAP,
    EMPTY,
    CacheStats,
    CorrectorCache,
    RealizationContext,
    WindowPolicy,
    alternating_form_term,
    cluster_form_term,
    clusters,
    common_neighbors,
    delta,
)
from errors import (
    CombinatorialGuardError,
    ConfigError,
    ContractError,
    ConvergenceError,
    LabError,
    ParameterError,
)
from inclusion_field import BALL_RADIUS, Grid, MaterialPair
from point_process import Box, PointCloud, Seed, sample_discretized, sample_poisson

logger = logging.getLogger(__name__)

MAX_MOMENT_TERMS = 5_000_000


class Verdict(str, Enum):
    PASS = "pass"
    INCONCLUSIVE = "inconclusive"
    FAIL = "fail"


class CoefficientForm(str, Enum):
    """Cluster formula with inclusion-exclusion fields, or plain alternating differences."""

    CLUSTER = "cluster"
    ALTERNATING = "alternating"

    @classmethod
    def for_rule(cls, rule: FaceRule) -> "CoefficientForm":
        """Cluster form under arithmetic faces, alternating form under harmonic faces.

        Only with arithmetic faces is the cluster formula the derivative of the
        discrete map at every order.
        """
        return cls.CLUSTER if FaceRule(rule) is FaceRule.ARITHMETIC else cls.ALTERNATING


def resolve_form(solver: SolverParams, form: Optional[CoefficientForm], order: int) -> CoefficientForm:
    """`form`, or the form matching the solver's face rule when unset."""
    if form is None:
        return CoefficientForm.for_rule(solver.face_rule)
    form = CoefficientForm(form)
    if form is CoefficientForm.CLUSTER and solver.face_rule is FaceRule.HARMONIC and order >= 2:
        logger.warning(
            "cluster form with harmonic faces is exact only up to order 1, asked for order %d", order
        )
    return form


@dataclass(frozen=True)
class MCParams:
    """Realization count, master seed, truncation and error-bar settings."""

    n_realizations: int
    seed: int
    rho_trunc: Optional[float] = None
    c0: float = 1.0
    eps_trunc: float = 1e-6
    confidence: float = 0.95
    workers: int = 1
    max_failure_rate: float = 0.01
    diagnostics: Optional["RunDiagnostics"] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.n_realizations < 1:
            raise ParameterError(f"need at least one realization, got {self.n_realizations}")
        if not 0 < self.confidence < 1:
            raise ParameterError(f"confidence must lie in (0, 1), got {self.confidence}")
        if self.workers < 1:
            raise ParameterError(f"workers must be positive, got {self.workers}")

    @property
    def z(self) -> float:
        return float(stats.norm.ppf(0.5 + self.confidence / 2))

    def truncation_radius(self, T: float, L: float) -> float:
        """rho_trunc, defaulting to c0 sqrt(T) ln(1/eps_trunc), at most L/2."""
        if self.rho_trunc is not None:
            rho = self.rho_trunc
        else:
            rho = self.c0 * math.sqrt(T) * math.log(1.0 / self.eps_trunc)
        if rho < BALL_RADIUS:
            raise ConfigError(f"truncation radius {rho} cannot contain a unit ball", "truncation.rho")
        if rho > L / 2:
            logger.warning("truncation radius %g clamped to L/2 = %g", rho, L / 2)
            rho = L / 2
        return rho

    def with_seed(self, seed: int) -> "MCParams":
        return MCParams(
            self.n_realizations,
            seed,
            self.rho_trunc,
            self.c0,
            self.eps_trunc,
            self.confidence,
            self.workers,
            self.max_failure_rate,
            self.diagnostics,
        )


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo mean with its standard error and confidence half-width."""

    mean: float
    stderr: float
    error_bar: float
    n_samples: int
    n_failed: int = 0

    @classmethod
    def from_samples(cls, samples: np.ndarray, z: float = 1.96, n_failed: int = 0) -> "Estimate":
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        if n == 0:
            raise LabError("no successful samples to estimate from")
        mean = float(np.sum(samples) / n)
        stderr = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(mean, stderr, z * stderr, n, n_failed)

    @classmethod
    def exact(cls, value: float) -> "Estimate":
        return cls(float(value), 0.0, 0.0, 1)

    def within(self, reference: float, n_stderr: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.mean - reference) <= n_stderr * self.stderr + slack


@dataclass(frozen=True)
class ContextFactory:
    """Builds one `RealizationContext` per realization index."""

    box: Box
    grid: Grid
    intensity: float
    h: float
    materials: MaterialPair
    solver: SolverParams
    subset_cap: int = DEFAULT_SUBSET_CAP
    window: Optional[WindowPolicy] = None
    cache_cells: int = DEFAULT_CACHE_CELLS

    def __post_init__(self):
        if self.grid.box != self.box:
            raise ContractError("grid and factory live on different boxes")

    def cloud(self, seed: Seed, index: int) -> PointCloud:
        if self.h > 0:
            return sample_discretized(self.h, self.intensity, self.box, seed, index)
        return sample_poisson(self.intensity, self.box, seed, index)

    def context(self, seed: Seed, index: int) -> RealizationContext:
        return RealizationContext(
            self.cloud(seed, index),
            self.materials,
            self.grid,
            self.solver,
            self.subset_cap,
            CorrectorCache(self.cache_cells),
            self.window,
            index,
        )


@dataclass
class SampleSet:
    """Per-realization sample vectors in realization order, with run diagnostics."""

    samples: np.ndarray
    n_failed: int
    cache: CacheStats = field(default_factory=CacheStats)
    solve_log: List[Tuple[int, str, int, float]] = field(default_factory=list)

    def estimate(self, column: int = 0, z: float = 1.96) -> Estimate:
        return Estimate.from_samples(self.samples[:, column], z, self.n_failed)


@dataclass
class RunDiagnostics:
    """Cache statistics, failures and solve log over every estimator call of a run."""

    cache: CacheStats = field(default_factory=CacheStats)
    solve_log: List[Tuple[int, str, int, float]] = field(default_factory=list)
    n_failed: int = 0
    n_calls: int = 0

    def absorb(self, samples: SampleSet) -> None:
        self.cache = self.cache.merge(samples.cache)
        self.solve_log += samples.solve_log
        self.n_failed += samples.n_failed
        self.n_calls += 1


def run_realizations(
    factory: ContextFactory,
    mc: MCParams,
    functional: Callable[[RealizationContext], Sequence[float]],
) -> SampleSet:
    """Evaluate `functional` on every realization and stack the results.

    Realizations whose solve does not converge are logged and dropped; more than
    `max_failure_rate` of them aborts the run.
    """
    seed = Seed(mc.seed)

    def one(index: int) -> Tuple[Optional[np.ndarray], CacheStats, List[Tuple[int, str, int, float]]]:
        context = factory.context(seed, index)
        try:
            value = np.atleast_1d(np.asarray(functional(context), dtype=float))
        except ConvergenceError as e:
            logger.warning("realization %d dropped: %s", index, e)
            value = None
        context.log_cache_stats()
        log = [(index, key, its, res) for key, its, res in context.solve_log]
        return value, context.cache.stats, log

    indices = range(mc.n_realizations)
    if mc.workers > 1:
        with ThreadPool(mc.workers) as pool:
            results = pool.map(one, indices)
    else:
        results = [one(i) for i in indices]

    rows = [value for value, _, _ in results if value is not None]
    failed = mc.n_realizations - len(rows)
    if failed > mc.max_failure_rate * mc.n_realizations:
        logger.error("%d of %d realizations failed", failed, mc.n_realizations)
        raise LabError(
            f"{failed} of {mc.n_realizations} realizations failed, above the "
            f"{mc.max_failure_rate:.0%} tolerance"
        )
    if not rows:
        raise LabError("every realization failed")
    cache = CacheStats()
    solve_log: List[Tuple[int, str, int, float]] = []
    for _, stats_, log in results:
        cache = cache.merge(stats_)
        solve_log += log
    samples = SampleSet(np.vstack(rows), failed, cache, solve_log)
    if mc.diagnostics is not None:
        mc.diagnostics.absorb(samples)
    return samples


def _coefficient_sample(
    context: RealizationContext,
    j: int,
    radius: float,
    form: CoefficientForm,
    base_fraction: float,
    seed: Seed,
) -> float:
    """One realization's contribution to the j-th coefficient, re-centered at u."""
    if base_fraction >= 1.0:
        return 0.0
    H = context.thinned(base_fraction, seed) if base_fraction > 0 else EMPTY
    if j == 0:
        return context.flux_value(H)
    candidates = [n for n in range(len(context.cloud)) if n not in H]
    term = cluster_form_term if CoefficientForm(form) is CoefficientForm.CLUSTER else alternating_form_term
    total = 0.0
    for F in clusters(context.cloud, candidates, j, radius):
        total += term(context, F, H)
    return math.factorial(j) * total / (1.0 - base_fraction) ** j


def _check_order(factory: ContextFactory, j: int) -> None:
    if j < 0:
        raise ParameterError(f"order must be non-negative, got {j}")
    if j > factory.subset_cap:
        raise CombinatorialGuardError(f"order {j} exceeds the subset cap {factory.subset_cap}")


def cluster_coefficient(
    factory: ContextFactory,
    j: int,
    mc: MCParams,
    form: Optional[CoefficientForm] = None,
    base_fraction: float = 0.0,
) -> Estimate:
    """Estimate of e.A^j e, the j-th p-derivative of the coefficient.

    With `base_fraction` u > 0 the expansion is taken around the thinning E^(u):
    the base set is E^(u), perturbing clusters come from its complement and the
    result is scaled by (1 - u)^(-j).
    """
    _check_order(factory, j)
    form = resolve_form(factory.solver, form, j)
    radius = mc.truncation_radius(factory.solver.T, factory.box.L)
    seed = Seed(mc.seed)
    samples = run_realizations(
        factory,
        mc,
        lambda ctx: [_coefficient_sample(ctx, j, radius, form, base_fraction, seed)],
    )
    estimate = samples.estimate(0, mc.z)
    logger.info("coefficient j=%d (u=%g): %.6g +- %.2g", j, base_fraction, estimate.mean, estimate.stderr)
    return estimate


def direct_coefficient(factory: ContextFactory, p: float, mc: MCParams) -> Estimate:
    """Estimate of e.A^(p) e by thinning, one solve and a flux average per realization."""
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"thinning parameter must lie in [0, 1], got {p}")
    seed = Seed(mc.seed)
    samples = run_realizations(factory, mc, lambda ctx: [ctx.flux_value(ctx.thinned(p, seed))])
    return samples.estimate(0, mc.z)


@dataclass(frozen=True)
class TruncationCheck:
    base: Estimate
    doubled: Estimate
    shift: Estimate
    verdict: Verdict


def truncation_doubling(
    factory: ContextFactory, j: int, mc: MCParams, form: Optional[CoefficientForm] = None
) -> TruncationCheck:
    """Compare the j-th coefficient at rho_trunc and 2 rho_trunc on the same realizations."""
    _check_order(factory, j)
    form = resolve_form(factory.solver, form, j)
    rho = mc.truncation_radius(factory.solver.T, factory.box.L)
    seed = Seed(mc.seed)

    def both(ctx: RealizationContext) -> List[float]:
        base = _coefficient_sample(ctx, j, rho, form, 0.0, seed)
        wide = _coefficient_sample(ctx, j, 2 * rho, form, 0.0, seed)
        return [base, wide, wide - base]

    samples = run_realizations(factory, mc, both)
    base, doubled, shift = (samples.estimate(c, mc.z) for c in range(3))
    verdict = Verdict.PASS if abs(shift.mean) < max(base.stderr, 1e-15) else Verdict.FAIL
    return TruncationCheck(base, doubled, shift, verdict)


@dataclass(frozen=True)
class TaylorRow:
    p: float
    direct: Estimate
    partial_sum: float
    remainder: Estimate
    bound_estimate: Optional[float]
    quality: str
    bound_stderr: Optional[float] = None

    def bound_verdict(self, n_stderr: float = 3.0) -> Verdict:
        """PASS below the bound, INCONCLUSIVE when the two overlap within the noise.

        A remainder at the noise floor never fails the bound.
        """
        if self.bound_estimate is None:
            return Verdict.PASS
        excess = self.remainder.mean - self.bound_estimate
        if excess <= 1e-12:
            return Verdict.PASS
        allowance = n_stderr * math.hypot(self.remainder.stderr, self.bound_stderr or 0.0)
        if excess <= allowance or self.quality == "noise":
            return Verdict.INCONCLUSIVE
        return Verdict.FAIL


@dataclass(frozen=True)
class TaylorReport:
    k: int
    coefficients: Tuple[Estimate, ...]
    rows: Tuple[TaylorRow, ...]
    slope: Optional[float]
    verdict: Verdict


def _fit_remainder_slope(
    rows: Sequence[TaylorRow], k: int, noise_ratio: float, min_span: float
) -> Tuple[Optional[float], Verdict]:
    clean = [
        r
        for r in rows
        if r.p > 0 and r.remainder.mean > 0 and r.remainder.stderr < noise_ratio * r.remainder.mean
    ]
    if len(clean) < 3 or max(r.p for r in clean) / min(r.p for r in clean) < min_span:
        logger.warning("remainder fit: noise floor reached before a usable range of p")
        return None, Verdict.INCONCLUSIVE
    slope = float(
        np.polyfit(np.log([r.p for r in clean]), np.log([r.remainder.mean for r in clean]), 1)[0]
    )
    return slope, Verdict.PASS if slope >= (k + 1) - 0.3 else Verdict.FAIL


def taylor_report(
    factory: ContextFactory,
    k: int,
    p_grid: Sequence[float],
    mc: MCParams,
    form: Optional[CoefficientForm] = None,
    with_bound: bool = True,
    noise_ratio: float = 0.1,
    min_span: float = 8.0,
) -> TaylorReport:
    """Remainder of the order-k expansion against direct values on a p-grid.

    Coefficients, direct values and the (k+1)-th coefficient at u in {0, p/2, p}
    are computed on the same realizations, so remainders carry paired errors.
    """
    if k < 0 or k > 3:
        raise CombinatorialGuardError(f"remainder tables support 0 <= k <= 3, got {k}")
    p_grid = [float(p) for p in p_grid]
    if any(not 0.0 <= p <= 1.0 for p in p_grid):
        raise ParameterError(f"p values must lie in [0, 1], got {p_grid}")
    _check_order(factory, k + 1 if with_bound else k)
    form = resolve_form(factory.solver, form, k + 1 if with_bound else k)
    radius = mc.truncation_radius(factory.solver.T, factory.box.L)
    seed = Seed(mc.seed)
    fractions = sorted({u for p in p_grid for u in (0.0, p / 2, p)}) if with_bound else []

    def functional(ctx: RealizationContext) -> List[float]:
        coefficients = [_coefficient_sample(ctx, j, radius, form, 0.0, seed) for j in range(k + 1)]
        directs = [ctx.flux_value(ctx.thinned(p, seed)) for p in p_grid]
        remainders = [
            d - sum(p**j / math.factorial(j) * c for j, c in enumerate(coefficients))
            for p, d in zip(p_grid, directs)
        ]
        bound = [_coefficient_sample(ctx, k + 1, radius, form, u, seed) for u in fractions]
        return coefficients + directs + remainders + bound

    samples = run_realizations(factory, mc, functional)
    z = mc.z
    m = len(p_grid)
    coefficients = tuple(samples.estimate(j, z) for j in range(k + 1))
    bound_at = {u: samples.estimate(2 * m + k + 1 + i, z) for i, u in enumerate(fractions)}
    rows = []
    for i, p in enumerate(p_grid):
        direct = samples.estimate(k + 1 + i, z)
        signed = samples.estimate(k + 1 + m + i, z)
        remainder = Estimate(abs(signed.mean), signed.stderr, signed.error_bar, signed.n_samples, signed.n_failed)
        partial = sum(p**j / math.factorial(j) * c.mean for j, c in enumerate(coefficients))
        bound = None
        bound_stderr = None
        if with_bound:
            peak = max((bound_at[u] for u in (0.0, p / 2, p)), key=lambda est: abs(est.mean))
            scale = p ** (k + 1) / math.factorial(k + 1)
            bound = scale * abs(peak.mean)
            bound_stderr = scale * peak.stderr
        if p == 0 or remainder.mean == 0:
            quality = "zero"
        elif remainder.stderr < noise_ratio * remainder.mean:
            quality = "ok"
        else:
            quality = "noise"
        rows.append(TaylorRow(p, direct, partial, remainder, bound, quality, bound_stderr))
    slope, verdict = _fit_remainder_slope(rows, k, noise_ratio, min_span)
    logger.info("taylor k=%d: slope %s, verdict %s", k, slope, verdict.value)
    return TaylorReport(k, coefficients, tuple(rows), slope, verdict)


def _s_values(ctx: RealizationContext, pairs: Sequence[Tuple[int, int]], radius: float) -> List[float]:
    labels = list(range(len(ctx.cloud)))
    values = []
    for j, k in pairs:
        total = 0.0
        for G in clusters(ctx.cloud, labels, k, radius):
            candidates = common_neighbors(ctx.cloud, G, labels, radius)
            accum = np.zeros((ctx.grid.d,) + ctx.grid.shape)
            for F in clusters(ctx.cloud, candidates, j, radius):
                accum += delta(ctx, F | G).components
            total += float(np.mean(np.sum(accum**2, axis=0)))
        values.append(total)
    return values


def s_table(factory: ContextFactory, max_order: int, mc: MCParams) -> Dict[Tuple[int, int], Estimate]:
    """S_j^k for all j + k <= max_order, sharing correctors within each realization."""
    if max_order > factory.subset_cap:
        raise CombinatorialGuardError(f"order {max_order} exceeds the subset cap {factory.subset_cap}")
    pairs = [(j, k) for total in range(max_order + 1) for j in range(total + 1) for k in [total - j]]
    radius = mc.truncation_radius(factory.solver.T, factory.box.L)
    samples = run_realizations(factory, mc, lambda ctx: _s_values(ctx, pairs, radius))
    return {pair: samples.estimate(i, mc.z) for i, pair in enumerate(pairs)}


def s_statistic(factory: ContextFactory, j: int, k: int, mc: MCParams) -> Estimate:
    """E[sum over k-clusters G of <|sum over j-clusters F disjoint from G of grad delta^{F u G} phi|^2>]."""
    if j < 0 or k < 0:
        raise ParameterError(f"orders must be non-negative, got j={j}, k={k}")
    if j + k > factory.subset_cap:
        raise CombinatorialGuardError(f"j + k = {j + k} exceeds the subset cap {factory.subset_cap}")
    radius = mc.truncation_radius(factory.solver.T, factory.box.L)
    samples = run_realizations(factory, mc, lambda ctx: _s_values(ctx, [(j, k)], radius))
    return samples.estimate(0, mc.z)


@dataclass(frozen=True)
class GevreyFit:
    """Fit of log(|A^j| / j!^2) against j and the smallest envelope constant."""

    constant: Optional[float]
    slope: Optional[float]
    intercept: Optional[float]
    curvature: Tuple[float, ...]
    verdict: Verdict
    used_orders: Tuple[int, ...] = ()


def gevrey_fit(coefficients: Sequence[Estimate], n_stderr: float = 3.0) -> GevreyFit:
    """Check |A^j| <= j!^2 C^j for a finite C over the resolved orders j >= 1.

    PASS when the second differences of log(|A^j| / j!^2) stay below `n_stderr`
    propagated errors, i.e. no super-linear growth in j.
    """
    orders = list(range(1, len(coefficients)))
    if all(coefficients[j].mean == 0 and coefficients[j].stderr == 0 for j in orders) and orders:
        return GevreyFit(0.0, None, None, (), Verdict.PASS, tuple(orders))
    used = [j for j in orders if abs(coefficients[j].mean) > coefficients[j].stderr and coefficients[j].mean != 0]
    if len(used) < 3:
        logger.warning("gevrey fit: only %d resolved coefficients", len(used))
        return GevreyFit(None, None, None, (), Verdict.INCONCLUSIVE, tuple(used))
    scaled = {j: abs(coefficients[j].mean) / math.factorial(j) ** 2 for j in used}
    y = {j: math.log(scaled[j]) for j in used}
    sigma = {j: coefficients[j].stderr / abs(coefficients[j].mean) for j in used}
    slope, intercept = np.polyfit(used, [y[j] for j in used], 1)
    constant = max(scaled[j] ** (1.0 / j) for j in used)

    curvature = []
    verdict = Verdict.PASS
    for a, b, c in zip(used, used[1:], used[2:]):
        if (b - a, c - b) != (1, 1):
            continue
        second = y[a] - 2 * y[b] + y[c]
        curvature.append(second)
        allowed = n_stderr * math.sqrt(sigma[a] ** 2 + 4 * sigma[b] ** 2 + sigma[c] ** 2)
        if second > allowed:
            verdict = Verdict.FAIL
    if not math.isfinite(constant):
        verdict = Verdict.FAIL
    return GevreyFit(constant, float(slope), float(intercept), tuple(curvature), verdict, tuple(used))


@dataclass(frozen=True)
class EnvelopeFit:
    """Smallest C with S_j^k <= j! C^(j+k) on every cell, up to `n_stderr` errors."""

    constant: float
    verdict: Verdict
    margins: Dict[Tuple[int, int], float]


def s_envelope_fit(table: Dict[Tuple[int, int], Estimate], n_stderr: float = 3.0) -> EnvelopeFit:
    cells = {jk: est for jk, est in table.items() if sum(jk) >= 1}
    if not cells:
        return EnvelopeFit(0.0, Verdict.INCONCLUSIVE, {})
    constant = 0.0
    for (j, k), est in cells.items():
        lower = max(est.mean - n_stderr * est.stderr, 0.0)
        constant = max(constant, (lower / math.factorial(j)) ** (1.0 / (j + k)))
    margins = {
        (j, k): math.factorial(j) * constant ** (j + k) - (est.mean - n_stderr * est.stderr)
        for (j, k), est in cells.items()
    }
    verdict = Verdict.PASS if math.isfinite(constant) else Verdict.FAIL
    return EnvelopeFit(constant, verdict, margins)


@dataclass(frozen=True)
class LocalFunctionalSpec:
    """Set function R used by the Poisson moment inequality.

    `sum` is sum_n exp(-kappa |x_n - x0|), `product` the product of the same
    factors (zero on the empty set), `zero` vanishes identically and `custom`
    calls `function(positions)` on the positions of F.
    """

    kind: str = "sum"
    kappa: float = 1.0
    anchor: Optional[Tuple[float, ...]] = None
    function: Optional[Callable[[np.ndarray], float]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("sum", "product", "zero", "custom"):
            raise ParameterError(f"unknown functional kind {self.kind!r}")
        if self.kind == "custom" and self.function is None:
            raise ParameterError("custom functional needs a function")
        if self.kappa <= 0:
            raise ParameterError(f"kappa must be positive, got {self.kappa}")

    def weights(self, cloud: PointCloud) -> np.ndarray:
        anchor = np.zeros(cloud.box.d) if self.anchor is None else np.asarray(self.anchor, dtype=float)
        return np.exp(-self.kappa * cloud.box.distance(anchor, cloud.positions))

    def evaluator(self, cloud: PointCloud) -> Callable[[Tuple[int, ...]], float]:
        """R as a function of a label tuple; raises unless R(empty) = 0."""
        if self.kind == "zero":
            evaluate = lambda F: 0.0  # noqa: E731
        elif self.kind == "custom":
            positions = cloud.positions
            evaluate = lambda F: float(self.function(positions[list(F)]))  # noqa: E731
        else:
            w = self.weights(cloud)
            if self.kind == "sum":
                evaluate = lambda F: float(np.sum(w[list(F)]))  # noqa: E731
            else:
                evaluate = lambda F: float(np.prod(w[list(F)])) if F else 0.0  # noqa: E731
        if evaluate(()) != 0.0:
            raise ContractError("R must vanish on the empty set")
        return evaluate


@dataclass(frozen=True)
class MomentResult:
    lhs: Estimate
    rhs: Estimate
    ratio: float
    constant_proxy: float
    ratio_stderr: float = 0.0


def _moment_sample(
    cloud: PointCloud, R: Callable, a: int, b: int, c: int, point: np.ndarray
) -> Tuple[float, float]:
    labels = range(len(cloud))
    covering = [n for n in labels if cloud.box.distance(point, cloud.positions[n]) < BALL_RADIUS]
    terms = math.comb(len(cloud), b) * math.comb(len(cloud), c) * (1 + math.comb(len(covering), a))
    if terms > MAX_MOMENT_TERMS:
        raise CombinatorialGuardError(f"moment inequality enumeration needs {terms} terms")

    def inner(G: Tuple[int, ...], excluded: set) -> float:
        pool = [n for n in labels if n not in excluded]
        return sum(R(tuple(sorted(F + G))) for F in itertools.combinations(pool, c))

    rhs = 0.0
    lhs = 0.0
    for G in itertools.combinations(labels, b):
        rhs += inner(G, set(G)) ** 2
        free = [n for n in covering if n not in G]
        for H in itertools.combinations(free, a):
            lhs += inner(G, set(G) | set(H)) ** 2
    return lhs, rhs


def moment_inequality_ratio(
    factory: ContextFactory,
    R: LocalFunctionalSpec,
    a: int,
    b: int,
    c: int,
    mc: MCParams,
) -> MomentResult:
    """Both sides of the Poisson moment inequality and the ratio lhs a! / rhs.

    The indicator of J_H is evaluated at a point drawn uniformly in the cell of
    side h (side 1 for Poisson clouds) at the functional's anchor. No PDE is solved.
    """
    if min(a, b, c) < 1:
        raise ParameterError(f"a, b, c must be at least 1, got {a}, {b}, {c}")
    if a + b + c > factory.subset_cap:
        raise CombinatorialGuardError(f"a + b + c = {a + b + c} exceeds the subset cap {factory.subset_cap}")
    seed = Seed(mc.seed)
    side = factory.h if factory.h > 0 else 1.0
    anchor = np.zeros(factory.box.d) if R.anchor is None else np.asarray(R.anchor, dtype=float)

    def one(index: int) -> Tuple[float, float]:
        cloud = factory.cloud(seed, index)
        point = factory.box.wrap(anchor + side * seed.generator("moment-point", index).random(factory.box.d))
        return _moment_sample(cloud, R.evaluator(cloud), a, b, c, point)

    indices = range(mc.n_realizations)
    if mc.workers > 1:
        with ThreadPool(mc.workers) as pool:
            pairs = pool.map(one, indices)
    else:
        pairs = [one(i) for i in indices]
    values = np.array(pairs, dtype=float)
    lhs = Estimate.from_samples(values[:, 0], mc.z)
    rhs = Estimate.from_samples(values[:, 1], mc.z)
    ratio = lhs.mean * math.factorial(a) / rhs.mean if rhs.mean > 0 else 0.0
    ratio_stderr = 0.0
    if rhs.mean > 0 and len(values) > 1:
        # delta method on paired samples
        influence = math.factorial(a) * (values[:, 0] - lhs.mean / rhs.mean * values[:, 1]) / rhs.mean
        ratio_stderr = float(np.std(influence, ddof=1) / math.sqrt(len(values)))
    result = MomentResult(lhs, rhs, ratio, ratio ** (1.0 / a), ratio_stderr)
    logger.info("moment inequality a=%d b=%d c=%d: ratio %.4g +- %.2g", a, b, c, ratio, ratio_stderr)
    return result


def geometric_growth(
    results: Sequence[MomentResult], n_stderr: float = 3.0, noise_ratio: float = 0.5
) -> Verdict:
    """Ratios for consecutive a may grow at most geometrically.

    Second differences of the log-ratios may exceed log 2 only by `n_stderr`
    propagated errors; a ratio whose relative error exceeds `noise_ratio` makes
    the verdict INCONCLUSIVE unless another term already fails.
    """
    ratios = [r.ratio for r in results]
    errors = [r.ratio_stderr for r in results]
    if any(not (math.isfinite(r) and math.isfinite(r + n_stderr * s)) for r, s in zip(ratios, errors)):
        return Verdict.FAIL
    if any(r <= 0 for r in ratios):
        return Verdict.INCONCLUSIVE
    logs = [math.log(r) for r in ratios]
    sigma = [s / r for r, s in zip(ratios, errors)]
    verdict = Verdict.PASS
    for i in range(len(logs) - 2):
        second = logs[i] - 2 * logs[i + 1] + logs[i + 2]
        allowed = n_stderr * math.sqrt(sigma[i] ** 2 + 4 * sigma[i + 1] ** 2 + sigma[i + 2] ** 2)
        if second > math.log(2.0) + allowed:
            return Verdict.FAIL
        if second > math.log(2.0):
            verdict = Verdict.INCONCLUSIVE
    if any(s > noise_ratio for s in sigma):
        logger.warning("moment ratios dominated by noise: relative errors %s", sigma)
        verdict = Verdict.INCONCLUSIVE
    return verdict


def stability_check(
    estimates: Sequence[Estimate], n_stderr: float = 3.0, noise_ratio: float = 0.5
) -> Verdict:
    """Every pair of estimates agrees within `n_stderr` combined standard errors.

    Non-finite values FAIL; estimates with relative error above `noise_ratio` make
    an otherwise passing check INCONCLUSIVE.
    """
    if any(not (math.isfinite(e.mean) and math.isfinite(e.stderr)) for e in estimates):
        return Verdict.FAIL
    for a, b in itertools.combinations(estimates, 2):
        if abs(a.mean - b.mean) > n_stderr * math.hypot(a.stderr, b.stderr) + 1e-12 * max(abs(a.mean), abs(b.mean)):
            return Verdict.FAIL
    if any(e.stderr > noise_ratio * abs(e.mean) for e in estimates):
        logger.warning("stability check below the noise floor")
        return Verdict.INCONCLUSIVE
    return Verdict.PASS


@dataclass(frozen=True)
class SweepTable:
    axis: str
    values: Tuple[float, ...]
    estimates: Tuple[Estimate, ...]
    differences: Tuple[float, ...]
    verdict: Verdict


def convergence_sweep(
    axis: str,
    values: Sequence[float],
    evaluate: Callable[[float], Estimate],
    n_stderr: float = 2.0,
) -> SweepTable:
    """Evaluate along an axis and check that successive differences shrink.

    A difference may exceed its predecessor only by the combined noise of the
    estimates involved.
    """
    values = [float(v) for v in values]
    steps = np.diff(values)
    if len(values) > 1 and not (np.all(steps > 0) or np.all(steps < 0)):
        raise ParameterError(f"sweep values along {axis} must be strictly monotone, got {values}")
    estimates = [evaluate(v) for v in values]
    differences = [b.mean - a.mean for a, b in zip(estimates, estimates[1:])]
    noise = [
        n_stderr * math.hypot(a.stderr, b.stderr) for a, b in zip(estimates, estimates[1:])
    ]
    verdict = Verdict.PASS
    for i in range(1, len(differences)):
        if abs(differences[i]) > abs(differences[i - 1]) + noise[i] + noise[i - 1]:
            verdict = Verdict.FAIL
    logger.info("sweep over %s: %d points, verdict %s", axis, len(values), verdict.value)
    return SweepTable(axis, tuple(values), tuple(estimates), tuple(differences), verdict)


@dataclass(frozen=True)
class ScalingCheck:
    slope: Optional[float]
    normalized: Tuple[float, ...]
    verdict: Verdict


def stderr_scaling(counts: Sequence[int], estimates: Sequence[Estimate], tolerance: float = 0.2) -> ScalingCheck:
    """stderr * sqrt(N) should stay within `tolerance` of its mean along an N-sweep."""
    normalized = [e.stderr * math.sqrt(n) for n, e in zip(counts, estimates)]
    if len(normalized) < 2 or min(normalized) <= 0:
        return ScalingCheck(None, tuple(normalized), Verdict.INCONCLUSIVE)
    slope = float(np.polyfit(np.log(counts), np.log([e.stderr for e in estimates]), 1)[0])
    center = float(np.mean(normalized))
    ok = all(abs(v - center) <= tolerance * center for v in normalized)
    return ScalingCheck(slope, tuple(normalized), Verdict.PASS if ok else Verdict.FAIL)

