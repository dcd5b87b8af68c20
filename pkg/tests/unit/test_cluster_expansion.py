# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

import logging
import math

import numpy as np
import pytest

from cluster_expansion import (
    CoefficientForm,
    ContextFactory,
    Estimate,
    LocalFunctionalSpec,
    MCParams,
    MomentResult,
    RunDiagnostics,
    TaylorRow,
    Verdict,
    cluster_coefficient,
    convergence_sweep,
    direct_coefficient,
    gevrey_fit,
    geometric_growth,
    moment_inequality_ratio,
    resolve_form,
    run_realizations,
    s_envelope_fit,
    s_statistic,
    s_table,
    stability_check,
    stderr_scaling,
    taylor_report,
    truncation_doubling,
)
from corrector_solver import FaceRule, SolverParams
from difference_calculus import IndexSet
from errors import CombinatorialGuardError, ConfigError, ContractError, ConvergenceError, LabError, ParameterError
from inclusion_field import Grid, MaterialPair, checkerboard_background
from oracle import harmonic_mean, taylor_coefficients_1d
from point_process import Box, PointCloud, Seed


def make_factory(L=20.0, n=200, intensity=0.1, h=0.0, T=1e6, materials=None, **kwargs):
    box = Box(d=1, L=L)
    return ContextFactory(
        box,
        Grid(box, n),
        intensity,
        h,
        materials or MaterialPair.isotropic(1, 1.0, 4.0),
        SolverParams.along_axis(1, T=T),
        **kwargs,
    )


def single_point_shift(ctx):
    """Sum over points of the harmonic-mean change caused by that point alone."""
    return sum(
        harmonic_mean(ctx.coefficients(IndexSet((label,))).packed[..., 0]) - 1.0
        for label in range(len(ctx.cloud))
    )


def test_estimate_from_samples():
    est = Estimate.from_samples(np.array([1.0, 2.0, 3.0, 4.0]), z=2.0, n_failed=1)
    assert est.mean == 2.5
    assert est.stderr == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert est.error_bar == pytest.approx(2.0 * est.stderr)
    assert (est.n_samples, est.n_failed) == (4, 1)
    assert Estimate.from_samples(np.array([5.0])).stderr == 0.0
    with pytest.raises(LabError):
        Estimate.from_samples(np.array([]))


def test_estimate_within():
    est = Estimate(1.0, 0.1, 0.2, 10)
    assert est.within(1.29)
    assert not est.within(1.31)
    assert est.within(1.4, slack=0.2)


def test_mc_params():
    mc = MCParams(n_realizations=4, seed=1)
    assert mc.z == pytest.approx(1.959964, rel=1e-6)
    assert mc.truncation_radius(4.0, 100.0) == pytest.approx(2.0 * math.log(1e6))
    assert mc.with_seed(9).seed == 9
    for bad in [dict(n_realizations=0), dict(confidence=1.0), dict(workers=0)]:
        with pytest.raises(ParameterError):
            MCParams(**{"n_realizations": 4, "seed": 1, **bad})


def test_truncation_radius_bounds(caplog):
    with caplog.at_level(logging.WARNING):
        assert MCParams(4, 1).truncation_radius(4.0, 20.0) == 10.0
    assert "clamped" in caplog.text
    with pytest.raises(ConfigError, match="truncation.rho"):
        MCParams(4, 1, rho_trunc=0.5).truncation_radius(4.0, 20.0)


def test_factory_rejects_foreign_grid():
    with pytest.raises(ContractError):
        ContextFactory(
            Box(1, 10.0),
            Grid(Box(1, 20.0), 200),
            0.1,
            0.0,
            MaterialPair.isotropic(1),
            SolverParams.along_axis(1, T=4.0),
        )


def test_realizations_keep_order_across_workers():
    factory = make_factory(L=50.0, intensity=0.5)
    serial = run_realizations(factory, MCParams(12, seed=3), lambda ctx: [len(ctx.cloud), ctx.index])
    threaded = run_realizations(factory, MCParams(12, seed=3, workers=4), lambda ctx: [len(ctx.cloud), ctx.index])
    assert np.array_equal(serial.samples, threaded.samples)
    assert list(serial.samples[:, 1]) == list(range(12))


def test_failed_realizations_are_dropped_up_to_the_tolerance():
    factory = make_factory()

    def flaky(ctx):
        if ctx.index == 0:
            raise ConvergenceError("no convergence", residual=1.0, iterations=10)
        return [1.0]

    with pytest.raises(LabError, match="1 of 10"):
        run_realizations(factory, MCParams(10, seed=1), flaky)

    diagnostics = RunDiagnostics()
    samples = run_realizations(factory, MCParams(10, seed=1, max_failure_rate=0.2, diagnostics=diagnostics), flaky)
    assert samples.samples.shape == (9, 1)
    assert samples.estimate().n_failed == 1
    assert (diagnostics.n_failed, diagnostics.n_calls) == (1, 1)


def test_first_coefficient_is_the_sum_of_single_point_shifts():
    factory = make_factory()
    mc = MCParams(3, seed=11)
    expected = np.mean([single_point_shift(factory.context(Seed(11), i)) for i in range(3)])
    estimate = cluster_coefficient(factory, 1, mc)
    assert estimate.mean == pytest.approx(expected, rel=1e-4, abs=5e-6)


def test_cluster_and_alternating_forms_agree_at_first_order():
    factory = make_factory(T=16.0)
    mc = MCParams(2, seed=5)
    cluster = cluster_coefficient(factory, 1, mc, CoefficientForm.CLUSTER)
    alternating = cluster_coefficient(factory, 1, mc, CoefficientForm.ALTERNATING)
    assert cluster.mean == pytest.approx(alternating.mean, abs=1e-8)


@pytest.mark.parametrize(
    "rule, form",
    [(FaceRule.HARMONIC, CoefficientForm.ALTERNATING), (FaceRule.ARITHMETIC, CoefficientForm.CLUSTER)],
)
def test_unset_form_follows_the_face_rule(rule, form):
    solver = SolverParams.along_axis(1, T=4.0, face_rule=rule)
    assert CoefficientForm.for_rule(rule) is form
    for order in range(4):
        assert resolve_form(solver, None, order) is form


def test_cluster_form_with_harmonic_faces_warns_beyond_first_order(caplog):
    harmonic = SolverParams.along_axis(1, T=4.0, face_rule=FaceRule.HARMONIC)
    with caplog.at_level(logging.WARNING):
        assert resolve_form(harmonic, CoefficientForm.CLUSTER, 1) is CoefficientForm.CLUSTER
    assert "exact only up to order 1" not in caplog.text
    with caplog.at_level(logging.WARNING):
        assert resolve_form(harmonic, "cluster", 2) is CoefficientForm.CLUSTER
    assert "exact only up to order 1" in caplog.text


def test_zeroth_coefficient_and_direct_values():
    factory = make_factory()
    mc = MCParams(2, seed=2)
    assert cluster_coefficient(factory, 0, mc).mean == pytest.approx(1.0)
    assert direct_coefficient(factory, 0.0, mc).mean == pytest.approx(1.0)
    contexts = [factory.context(Seed(2), i) for i in range(2)]
    full = np.mean([harmonic_mean(ctx.coefficients(ctx.all_labels).packed[..., 0]) for ctx in contexts])
    assert direct_coefficient(factory, 1.0, mc).mean == pytest.approx(full, rel=1e-4)
    with pytest.raises(ParameterError):
        direct_coefficient(factory, 1.5, mc)


def test_order_guards():
    factory = make_factory(subset_cap=2)
    mc = MCParams(1, seed=0)
    with pytest.raises(CombinatorialGuardError):
        cluster_coefficient(factory, 3, mc)
    with pytest.raises(ParameterError):
        cluster_coefficient(factory, -1, mc)
    with pytest.raises(CombinatorialGuardError):
        taylor_report(factory, 4, [0.5], mc)


def test_taylor_report_at_order_zero():
    factory = make_factory()
    report = taylor_report(factory, 0, [0.25, 0.5, 1.0], MCParams(2, seed=4), with_bound=False)
    assert report.coefficients[0].mean == pytest.approx(1.0)
    for row in report.rows:
        assert row.partial_sum == pytest.approx(1.0)
        assert row.remainder.mean == pytest.approx(abs(row.direct.mean - 1.0), abs=1e-12)
        assert row.bound_estimate is None
    # span 1.0 / 0.25 is below the fit's minimum
    assert report.verdict is Verdict.INCONCLUSIVE


@pytest.mark.slow
def test_first_coefficient_matches_closed_form():
    factory = make_factory(L=200.0, n=2000, intensity=0.1)
    estimate = cluster_coefficient(factory, 1, MCParams(20, seed=7, workers=2))
    reference = taylor_coefficients_1d(0.1, 1, 1.0, 4.0)[1]
    assert reference == pytest.approx(0.15)
    assert estimate.within(reference, 3.0, slack=0.005)


def exact(values):
    return [Estimate(float(v), 1e-12 * abs(v), 0.0, 100) for v in values]


def test_gevrey_fit_accepts_factorial_squared_growth():
    fit = gevrey_fit(exact([1.0] + [math.factorial(j) ** 2 * 2.0**j for j in range(1, 6)]))
    assert fit.verdict is Verdict.PASS
    assert fit.constant == pytest.approx(2.0)
    assert fit.slope == pytest.approx(math.log(2.0))
    assert fit.used_orders == (1, 2, 3, 4, 5)


def test_gevrey_fit_rejects_faster_growth():
    fit = gevrey_fit(exact([1.0] + [math.factorial(j) ** 3 for j in range(1, 6)]))
    assert fit.verdict is Verdict.FAIL


def test_gevrey_fit_edge_cases():
    zeros = [Estimate.exact(1.0)] + [Estimate.exact(0.0)] * 3
    assert gevrey_fit(zeros).verdict is Verdict.PASS
    noisy = [Estimate.exact(1.0), Estimate(0.1, 1.0, 2.0, 10), Estimate(2.0, 0.01, 0.02, 10)]
    fit = gevrey_fit(noisy)
    assert fit.verdict is Verdict.INCONCLUSIVE
    assert fit.used_orders == (2,)


def test_s_envelope_fit():
    table = {
        (0, 0): Estimate.exact(9.0),
        (1, 0): Estimate.exact(2.0),
        (0, 1): Estimate.exact(4.0),
        (1, 1): Estimate.exact(8.0),
    }
    fit = s_envelope_fit(table)
    assert fit.verdict is Verdict.PASS
    assert fit.constant == pytest.approx(4.0)
    assert all(margin >= -1e-12 for margin in fit.margins.values())
    assert s_envelope_fit({(0, 0): Estimate.exact(1.0)}).verdict is Verdict.INCONCLUSIVE


@pytest.mark.parametrize(
    "stderrs, verdict",
    [
        ([1.0, 0.5, 0.25], Verdict.PASS),
        ([1.0, 1.0, 1.0], Verdict.FAIL),
        ([1.0], Verdict.INCONCLUSIVE),
    ],
)
def test_stderr_scaling(stderrs, verdict):
    counts = [10, 40, 160][: len(stderrs)]
    check = stderr_scaling(counts, [Estimate(0.0, s, 2 * s, n) for s, n in zip(stderrs, counts)])
    assert check.verdict is verdict
    if verdict is Verdict.PASS:
        assert check.slope == pytest.approx(-0.5)


def test_convergence_sweep():
    shrinking = convergence_sweep("h", [0.4, 0.2, 0.1], lambda h: Estimate.exact(1.0 + h**2))
    assert shrinking.verdict is Verdict.PASS
    assert shrinking.differences == pytest.approx((0.04 - 0.16, 0.01 - 0.04))
    growing = convergence_sweep("T", [1, 2, 3], lambda T: Estimate.exact(2.0**T))
    assert growing.verdict is Verdict.FAIL
    with pytest.raises(ParameterError):
        convergence_sweep("L", [1, 3, 2], lambda L: Estimate.exact(L))


def test_local_functional_spec():
    cloud = PointCloud.from_positions(Box(1, 10.0), [[0.0], [1.0], [9.0]])
    R = LocalFunctionalSpec("sum", kappa=1.0).evaluator(cloud)
    assert R((0,)) == pytest.approx(1.0)
    assert R((1, 2)) == pytest.approx(2 * math.exp(-1.0))
    product = LocalFunctionalSpec("product").evaluator(cloud)
    assert product(()) == 0.0
    assert product((1, 2)) == pytest.approx(math.exp(-2.0))
    with pytest.raises(ParameterError):
        LocalFunctionalSpec("cubic")
    with pytest.raises(ParameterError):
        LocalFunctionalSpec("custom")
    with pytest.raises(ContractError):
        LocalFunctionalSpec("custom", function=lambda positions: 1.0).evaluator(cloud)


def test_moment_inequality_small_case():
    factory = make_factory(L=6.0, n=60, intensity=0.5)
    mc = MCParams(8, seed=13)
    result = moment_inequality_ratio(factory, LocalFunctionalSpec("sum", kappa=0.5), 1, 1, 1, mc)
    assert result.rhs.mean > 0
    assert result.lhs.mean >= 0
    assert result.ratio == pytest.approx(result.lhs.mean / result.rhs.mean)
    assert result.constant_proxy == pytest.approx(result.ratio)
    again = moment_inequality_ratio(factory, LocalFunctionalSpec("sum", kappa=0.5), 1, 1, 1, mc)
    assert again == result
    vanishing = moment_inequality_ratio(factory, LocalFunctionalSpec("zero"), 1, 1, 1, mc)
    assert vanishing.ratio == 0.0


def test_moment_inequality_guards():
    factory = make_factory(subset_cap=2)
    with pytest.raises(CombinatorialGuardError):
        moment_inequality_ratio(factory, LocalFunctionalSpec(), 1, 1, 1, MCParams(1, seed=0))
    with pytest.raises(ParameterError):
        moment_inequality_ratio(factory, LocalFunctionalSpec(), 0, 1, 1, MCParams(1, seed=0))


def test_moment_ratio_carries_a_paired_error():
    factory = make_factory(L=6.0, n=60, intensity=0.5)
    mc = MCParams(8, seed=13)
    result = moment_inequality_ratio(factory, LocalFunctionalSpec("sum", kappa=0.5), 1, 1, 1, mc)
    assert math.isfinite(result.ratio_stderr)
    assert result.ratio_stderr >= 0.0
    assert moment_inequality_ratio(factory, LocalFunctionalSpec("zero"), 1, 1, 1, mc).ratio_stderr == 0.0
    single = moment_inequality_ratio(factory, LocalFunctionalSpec("sum", kappa=0.5), 1, 1, 1, MCParams(1, seed=13))
    assert single.ratio_stderr == 0.0


def moments(ratios, relative_errors):
    zero = Estimate.exact(0.0)
    return [MomentResult(zero, zero, r, r, s * r) for r, s in zip(ratios, relative_errors)]


@pytest.mark.parametrize(
    "ratios, relative_errors, verdict",
    [
        ([1.0, 2.0, 4.0], [0.01] * 3, Verdict.PASS),
        ([1.0, 1.0, 100.0], [0.01] * 3, Verdict.FAIL),
        # second difference log 3 sits inside the propagated error band
        ([1.0, 1.0, 3.0], [0.1] * 3, Verdict.INCONCLUSIVE),
        ([1.0, 2.0, 4.0], [0.8, 0.1, 0.1], Verdict.INCONCLUSIVE),
        ([1.0, 0.0, 4.0], [0.01] * 3, Verdict.INCONCLUSIVE),
        ([1.0, float("inf"), 4.0], [0.01] * 3, Verdict.FAIL),
        ([1.0, 2.0], [0.01] * 2, Verdict.PASS),
    ],
)
def test_geometric_growth_weighs_the_errors(ratios, relative_errors, verdict):
    assert geometric_growth(moments(ratios, relative_errors)) is verdict


def test_geometric_growth_fails_on_a_non_finite_error():
    results = [MomentResult(Estimate.exact(0.0), Estimate.exact(0.0), 1.0, 1.0, float("nan"))]
    assert geometric_growth(results) is Verdict.FAIL


@pytest.mark.parametrize(
    "estimates, verdict",
    [
        ([Estimate(1.0, 0.01, 0.02, 50), Estimate(1.02, 0.01, 0.02, 50), Estimate(0.99, 0.01, 0.02, 50)], Verdict.PASS),
        ([Estimate(1.0, 0.01, 0.02, 50), Estimate(1.2, 0.01, 0.02, 50)], Verdict.FAIL),
        ([Estimate(1.0, 0.6, 1.2, 50), Estimate(1.1, 0.6, 1.2, 50)], Verdict.INCONCLUSIVE),
        ([Estimate.exact(0.0), Estimate.exact(0.0)], Verdict.PASS),
        ([Estimate(1.0, 0.01, 0.02, 50), Estimate(float("nan"), 0.01, 0.02, 50)], Verdict.FAIL),
    ],
)
def test_stability_check(estimates, verdict):
    assert stability_check(estimates) is verdict


def taylor_row(remainder, stderr, bound, bound_stderr=0.0, quality="ok"):
    measured = Estimate(remainder, stderr, 2 * stderr, 10)
    return TaylorRow(0.5, Estimate.exact(1.0), 1.0, measured, bound, quality, bound_stderr)


@pytest.mark.parametrize(
    "row, verdict",
    [
        (taylor_row(0.01, 0.001, 0.02), Verdict.PASS),
        (taylor_row(0.01, 0.001, None), Verdict.PASS),
        # 0.012 - 0.01 is within 3 * hypot(0.001, 0.0005)
        (taylor_row(0.012, 0.001, 0.01, bound_stderr=0.0005), Verdict.INCONCLUSIVE),
        (taylor_row(0.05, 0.001, 0.01, quality="noise"), Verdict.INCONCLUSIVE),
        (taylor_row(0.05, 0.001, 0.01, bound_stderr=0.001), Verdict.FAIL),
    ],
)
def test_remainder_bound_verdict(row, verdict):
    assert row.bound_verdict() is verdict


def test_taylor_report_carries_the_bound_error():
    factory = make_factory()
    report = taylor_report(factory, 0, [0.5, 1.0], MCParams(3, seed=4))
    for row in report.rows:
        assert row.bound_estimate is not None
        assert row.bound_stderr is not None and row.bound_stderr >= 0.0
        assert row.bound_verdict() in set(Verdict)


def test_s_statistics_vanish_without_a_background_gradient():
    # GIVEN a constant background, where the empty corrector is zero
    factory = make_factory(T=4.0)
    mc = MCParams(2, seed=6)

    # WHEN S_0^0 is estimated
    # THEN it is zero on every realization
    assert s_statistic(factory, 0, 0, mc).mean == 0.0


def test_s_table_vanishes_at_zero_contrast():
    # GIVEN inclusions with the background's own coefficient
    factory = make_factory(T=4.0, materials=MaterialPair.isotropic(1, 2.0, 2.0))

    # WHEN the table up to order 2 is estimated
    table = s_table(factory, 2, MCParams(2, seed=6))

    # THEN every entry is zero
    assert sorted(table) == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (2, 0)]
    assert all(estimate.mean == 0.0 for estimate in table.values())


def test_s_zero_zero_is_bounded_by_the_background_mean():
    # GIVEN a checkerboard background with values 1 and 2
    box = Box(d=1, L=20.0)
    grid = Grid(box, 200)
    board = checkerboard_background(grid, np.eye(1), 2.0 * np.eye(1), period=2.0)
    factory = make_factory(T=4.0, materials=MaterialPair(np.eye(1), 4.0 * np.eye(1), 1.0, 4.0, board))

    # WHEN S_0^0 is estimated
    estimate = s_statistic(factory, 0, 0, MCParams(2, seed=6))

    # THEN it is positive and below the arithmetic mean of the background
    assert estimate.mean > 0.0
    assert estimate.mean <= float(np.mean(board.packed[..., 0])) + 1e-12
    assert s_table(factory, 0, MCParams(2, seed=6))[(0, 0)].mean == pytest.approx(estimate.mean, abs=1e-12)


def test_s_statistic_guards():
    factory = make_factory(subset_cap=2)
    with pytest.raises(ParameterError):
        s_statistic(factory, -1, 0, MCParams(1, seed=0))
    with pytest.raises(CombinatorialGuardError):
        s_statistic(factory, 2, 1, MCParams(1, seed=0))
    with pytest.raises(CombinatorialGuardError):
        s_table(factory, 3, MCParams(1, seed=0))


def test_first_coefficient_ignores_the_truncation_radius():
    # GIVEN the first coefficient, whose clusters are single points
    factory = make_factory(T=4.0)

    # WHEN the truncation radius is doubled
    check = truncation_doubling(factory, 1, MCParams(3, seed=9, rho_trunc=2.0))

    # THEN nothing moves
    assert check.shift.mean == 0.0
    assert check.base.mean == check.doubled.mean
    assert check.verdict is Verdict.PASS


def test_truncation_doubling_at_zero_contrast():
    factory = make_factory(T=4.0, materials=MaterialPair.isotropic(1, 2.0, 2.0))
    check = truncation_doubling(factory, 2, MCParams(2, seed=9, rho_trunc=2.0))
    assert check.base.mean == check.doubled.mean == 0.0
    assert check.verdict is Verdict.PASS


@pytest.mark.slow
def test_second_coefficient_matches_closed_form():
    # GIVEN a long 1D box at vanishing massive term, where the homogenized
    # coefficient is the harmonic mean
    factory = make_factory(L=100.0, n=500, intensity=0.1)

    # WHEN the second coefficient is estimated with the default form
    estimate = cluster_coefficient(factory, 2, MCParams(20, seed=7, workers=2))

    # THEN it matches the closed form within 3 standard errors plus the discretization allowance
    reference = taylor_coefficients_1d(0.1, 2, 1.0, 4.0)[2]
    assert reference == pytest.approx(0.015)
    assert estimate.within(reference, 3.0, slack=0.003)
