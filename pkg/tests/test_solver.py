import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmfb.linops import DenseSPD, Diagonal, ScaledIdentity
from vmfb.operators import (
    AffineMonotone,
    L1BallIndicator,
    LeastSquaresGradient,
    ParameterError,
    Zero,
    ZeroMap,
    fixed_point_residual,
    forward_backward_map,
)
from vmfb.problems import build_lasso, generate_lasso_instance
from vmfb.solver import (
    Schedules,
    Status,
    StopMode,
    StoppingRule,
    constant,
    decaying_noise,
    fb_step,
    from_list,
    ramp,
    relaxation_upper_bound,
    solve,
    stopping_check,
    validate_schedules,
)

I = ScaledIdentity(1.0)


@pytest.fixture(scope="module")
def desk():
    inst = generate_lasso_instance(24, 100, 4, seed=1)
    P, B, beta = build_lasso(inst)
    return inst, P, B, beta


# -- relaxation bound ---------------------------------------------------------

def test_relaxation_upper_bound_examples():
    assert relaxation_upper_bound(1, 1, 1) == pytest.approx(1.5)
    assert relaxation_upper_bound(1, 1e-12, 1) == pytest.approx(2.0)
    v = relaxation_upper_bound(1, 2 - 1e-9, 1)
    assert 1.0 < v < 1.0 + 1e-8


def test_relaxation_upper_bound_rejects_bad_gamma():
    with pytest.raises(ParameterError):
        relaxation_upper_bound(1, 2.0, 1)


# -- stopping -----------------------------------------------------------------

def test_stopping_check_examples():
    rule = StoppingRule(1e-6)
    assert stopping_check(rule, np.array([1.0, 0.0]), np.array([1.0, 1e-7]))
    x = np.array([0.3, -2.0])
    assert stopping_check(StoppingRule(1e-300), x, x)
    assert not stopping_check(rule, np.zeros(2), np.array([1.0, 0.0]))
    assert stopping_check(rule, np.zeros(2), np.array([1e-7, 0.0]))


def test_stopping_check_residual_mode():
    rule = StoppingRule(1e-6, mode=StopMode.FIXED_POINT_RESIDUAL)
    assert stopping_check(rule, np.zeros(1), np.ones(1), residual=1e-7)
    assert not stopping_check(rule, np.zeros(1), np.zeros(1), residual=1e-5)


def test_stopping_rule_validation():
    with pytest.raises(ValueError):
        StoppingRule(0.0)
    with pytest.raises(ValueError):
        StoppingRule(1e-6, max_iter=0)
    assert StoppingRule(mode="FixedPointResidual").mode is StopMode.FIXED_POINT_RESIDUAL


# -- streams ------------------------------------------------------------------

def test_streams():
    assert constant(3.0)(10**9) == 3.0
    r = ramp(1.0, 0.5, hi=2.0)
    assert [r(k) for k in range(4)] == [1.0, 1.5, 2.0, 2.0]
    f = from_list([1, 2, 3])
    assert len(f) == 3 and f(2) == 3
    with pytest.raises(IndexError):
        f(3)


def test_decaying_noise_norms_and_reproducibility():
    e = decaying_noise(5, c=0.1, seed=3)
    for k in (0, 1, 9, 99):
        assert np.linalg.norm(e(k)) == pytest.approx(0.1 / (k + 1) ** 2)
    assert np.array_equal(e(7), decaying_noise(5, c=0.1, seed=3)(7))
    assert not np.array_equal(e(7), decaying_noise(5, c=0.1, seed=4)(7))


def test_schedules_wrap_values():
    S = Schedules(gamma=[0.1, 0.2], lam=1.0, metric=Diagonal([1.0, 2.0]))
    assert S.length() == 2
    U, g, lam = S.at(1)
    assert isinstance(U, Diagonal) and g == 0.2 and lam == 1.0
    assert Schedules.constant(0.1, 1.0).length() is None


# -- validity report ----------------------------------------------------------

def test_validate_constant_admissible_passes_thm31():
    rep = validate_schedules(Schedules.constant(1.0, 1.0), beta=1.0, horizon=500)
    assert rep.passed, rep.failed()
    assert rep["lambda_uniform_gap"].heuristic
    assert not rep["gamma_range"].heuristic


def test_validate_lambda_above_bound_fails():
    beta, gamma = 1.0, 1.0
    lam = relaxation_upper_bound(beta, gamma, 1.0) + 0.1
    rep = validate_schedules(Schedules.constant(gamma, lam), beta, horizon=100)
    assert "lambda_range" in rep.failed()


def test_validate_vanishing_gap_thm31_vs_thm32():
    beta, gamma = 1.0, 1.0
    bound = relaxation_upper_bound(beta, gamma, 1.0)
    S = Schedules(gamma=gamma, lam=lambda k: bound - 1.0 / (k + 2))
    r31 = validate_schedules(S, beta, horizon=4000, mode="Thm31")
    r32 = validate_schedules(S, beta, horizon=4000, mode="Thm32")
    assert "lambda_uniform_gap" in r31.failed()
    assert r32["relaxation_sum_divergent"].passed
    assert r32.passed, r32.failed()


def test_validate_summable_gap_sum_fails_thm32():
    beta, gamma = 1.0, 1.0
    bound = relaxation_upper_bound(beta, gamma, 1.0)
    S = Schedules(gamma=gamma, lam=lambda k: bound - 1.0 / (k + 2) ** 2)
    rep = validate_schedules(S, beta, horizon=4000, mode="Thm32")
    assert "relaxation_sum_divergent" in rep.failed()


def test_validate_metric_ordering():
    # U_k = (1 + 1/(k+1)) I decreases: (1+eta) U_{k+1} >= U_k needs eta ~ 1/k, not summable
    S = Schedules(gamma=0.1, lam=1.0, metric=lambda k: ScaledIdentity(1.0 + 1.0 / (k + 1)))
    rep = validate_schedules(S, beta=1.0, horizon=200)
    assert "metric_monotone" in rep.failed()
    # with the matching eta sequence the ordering holds but eta is not summable
    S = Schedules(gamma=0.1, lam=1.0, metric=lambda k: ScaledIdentity(1.0 + 1.0 / (k + 1)),
                  eta=lambda k: 1.0 / (k + 1))
    rep = validate_schedules(S, beta=1.0, horizon=2000)
    assert rep["metric_monotone"].passed
    assert "eta_summable" in rep.failed()


def test_validate_metric_ordering_dense():
    M = np.array([[2.0, 0.5], [0.5, 1.0]])
    S = Schedules(gamma=0.1, lam=1.0,
                  metric=lambda k: DenseSPD(M if k % 2 == 0 else M + 0.3 * np.eye(2)))
    rep = validate_schedules(S, beta=1.0, horizon=20)
    assert "metric_monotone" in rep.failed()


def test_validate_thm32_metric_variation_probes():
    S = Schedules(gamma=0.1, lam=1.0,
                  metric=lambda k: Diagonal([1.0, 2.0 if k % 2 else 1.0]),
                  eta=lambda k: 1.0)
    rep = validate_schedules(S, beta=1.0, horizon=400, mode="Thm32", dim=2)
    assert "metric_inverse_variation_summable" in rep.failed()
    S = Schedules(gamma=0.1, lam=1.0,
                  metric=lambda k: Diagonal([1.0, 2.0 - 1.0 / (k + 1) ** 2]))
    rep = validate_schedules(S, beta=1.0, horizon=400, mode="Thm32", dim=2)
    assert rep["metric_inverse_variation_summable"].passed


def test_validate_errors_summability():
    S = Schedules(gamma=0.5, lam=1.0, a_err=decaying_noise(3), b_err=lambda k: np.ones(3))
    rep = validate_schedules(S, beta=1.0, horizon=400)
    assert rep["errors_a_summable"].passed
    assert "errors_b_summable" in rep.failed()
    S = Schedules(gamma=0.5, lam=1.0, a_err=decaying_noise(3, c=10.0), error_cap=1.0)
    assert "errors_a_summable" in validate_schedules(S, 1.0, 100).failed()


def test_validate_report_serializes():
    rep = validate_schedules(Schedules.constant(1.0, 1.0), 1.0, 10, mode="Thm32")
    d = rep.to_dict()
    assert d["mode"] == "Thm32" and d["passed"] and len(d["checks"]) == len(rep.checks)
    with pytest.raises(ValueError):
        validate_schedules(Schedules.constant(1.0, 1.0), 1.0, 0)


# -- fb_step ------------------------------------------------------------------

def test_fb_step_examples():
    x = np.array([2.0, -4.0])
    assert np.array_equal(fb_step(Zero(), ZeroMap(), I, 0.7, 1.3, None, None, x), x)
    B = AffineMonotone(np.eye(2), np.zeros(2))
    assert np.allclose(fb_step(Zero(), B, I, 1.0, 1.0, None, None, x), [0.0, 0.0])
    assert np.allclose(fb_step(Zero(), B, I, 1.0, 1.5, None, None, x), [-1.0, 2.0])


def test_fb_step_strict_rejects_bad_parameters():
    B = AffineMonotone(np.eye(2), np.zeros(2))
    with pytest.raises(ParameterError):
        fb_step(Zero(), B, I, 1.0, 1.6, None, None, np.ones(2), strict=True)
    with pytest.raises(ParameterError):
        fb_step(Zero(), B, I, 2.0, 1.0, None, None, np.ones(2), strict=True)
    fb_step(Zero(), B, I, 1.0, 1.6, None, None, np.ones(2))  # permissive by default


def test_fb_step_is_relaxed_composed_map(desk):
    inst, P, B, beta = desk
    rng = np.random.default_rng(0)
    U = Diagonal(rng.uniform(0.5, 1.5, size=100))
    gamma = 1.2 * beta / U.norm
    T = forward_backward_map(P, B, gamma, U)
    for lam in (0.3, 1.0, 1.4):
        x = rng.normal(size=100)
        assert np.array_equal(fb_step(P, B, U, gamma, lam, None, None, x), x + lam * (T(x) - x))


def test_fb_step_with_errors():
    B = AffineMonotone(np.eye(2), np.zeros(2))
    x = np.array([1.0, 1.0])
    a, b = np.array([0.1, 0.0]), np.array([0.0, 0.2])
    # y = x - (x + b) = -b; J = id; x+ = x + lam (-b + a - x)
    assert np.allclose(fb_step(Zero(), B, I, 1.0, 1.0, a, b, x), a - b)


# -- solve --------------------------------------------------------------------

def test_solve_gradient_step_hits_center_in_one_step():
    c = np.array([1.0, -2.0, 0.5])
    B = LeastSquaresGradient(np.eye(3), c)
    tr = solve(Zero(), B, Schedules.constant(1.0, 1.0), StoppingRule(1e-12, 10,
               StopMode.FIXED_POINT_RESIDUAL), np.array([5.0, 5.0, 5.0]))
    assert tr.iterations == 1
    assert np.allclose(tr.iterates[1], c, atol=1e-15)
    assert tr.final_residual == pytest.approx(0.0, abs=1e-15)
    assert tr.status is Status.CONVERGED


def test_solve_desk_lasso_tight(desk):
    inst, P, B, beta = desk
    tr = solve(P, B, Schedules.constant(1.9 * beta, 1.05), StoppingRule(1e-8),
               np.zeros(100))
    assert tr.status is Status.CONVERGED
    assert fixed_point_residual(P, B, 1.9 * beta, I, tr.x) <= 1e-6


def test_solve_small_lambda_needs_more_iterations(desk):
    inst, P, B, beta = desk
    counts = [solve(P, B, Schedules.constant(0.5 * beta, lam), StoppingRule(1e-6),
                    np.zeros(100), store_iterates=False).iterations for lam in (0.2, 1.75)]
    assert counts[0] > counts[1]


def test_solve_trace_shape_and_fields(desk):
    inst, P, B, beta = desk
    tr = solve(P, B, Schedules.constant(beta, 1.0), StoppingRule(1e-4), np.zeros(100),
               reference=inst.x_true)
    n_rows = tr.iterations + 1
    for col in (tr.k, tr.residual, tr.rel_change, tr.obj, tr.dist, tr.gamma, tr.lam,
                tr.inv_alpha):
        assert len(col) == n_rows
    assert tr.iterates.shape == (n_rows, 100)
    assert math.isnan(tr.rel_change[0])
    assert tr.obj[0] == pytest.approx(inst.objective(np.zeros(100)))
    assert tr.dist[0] == pytest.approx(np.linalg.norm(inst.x_true))
    assert np.all(tr.inv_alpha == pytest.approx(1.5, rel=1e-12))
    assert np.array_equal(tr.iterates[-1], tr.x)
    assert tr.rel_change[-1] <= 1e-4


def test_solve_store_iterates_default_depends_on_dim():
    n = 300
    B = LeastSquaresGradient(np.eye(n), np.ones(n))
    tr = solve(Zero(), B, Schedules.constant(0.5, 1.0), StoppingRule(1e-6), np.zeros(n))
    assert tr.iterates is None
    tr = solve(Zero(), B, Schedules.constant(0.5, 1.0), StoppingRule(1e-6), np.zeros(n),
               store_iterates=True)
    assert tr.iterates.shape[1] == n


def test_solve_max_iter():
    B = LeastSquaresGradient(np.eye(2), np.ones(2))
    tr = solve(Zero(), B, Schedules.constant(0.01, 0.1), StoppingRule(1e-15, max_iter=7),
               np.zeros(2))
    assert tr.status is Status.MAX_ITER
    assert tr.iterations == 7 and len(tr.k) == 8


def test_solve_strict_parameter_violation_and_permissive(caplog):
    B = LeastSquaresGradient(np.eye(2), np.ones(2))
    S = Schedules.constant(1.0 / B.lipschitz, 1.6)  # bound is 1.5
    tr = solve(Zero(), B, S, StoppingRule(1e-8), np.zeros(2))
    assert tr.status is Status.PARAMETER_VIOLATION
    assert tr.iterations == 0 and "lambda" in tr.message
    with caplog.at_level(logging.WARNING, logger="vmfb.solver"):
        tr = solve(Zero(), B, S, StoppingRule(1e-8), np.zeros(2), strict=False)
    assert tr.status is Status.CONVERGED
    assert sum("permissive" in r.message for r in caplog.records) == 1


def test_solve_violation_mid_run():
    B = LeastSquaresGradient(np.eye(2), np.ones(2))
    S = Schedules(gamma=from_list([0.5] * 3 + [2.5] * 20), lam=1.0)
    tr = solve(Zero(), B, S, StoppingRule(1e-30, max_iter=20), np.zeros(2))
    assert tr.status is Status.PARAMETER_VIOLATION
    assert tr.iterations == 3


def test_solve_boundary_relaxation_is_admitted():
    B = LeastSquaresGradient(np.eye(2), np.ones(2))
    gamma = 1.9 * B.beta
    lam = (4.0 - 1.9) / 2.0
    tr = solve(Zero(), B, Schedules.constant(gamma, lam), StoppingRule(1e-8), np.zeros(2))
    assert tr.status is Status.CONVERGED


def test_solve_blow_up_detected():
    B = LeastSquaresGradient(np.eye(2), np.ones(2))
    with np.errstate(over="ignore", invalid="ignore"):
        tr = solve(Zero(), B, Schedules.constant(10.0, 1.0), StoppingRule(1e-8, 10_000),
                   np.ones(2) * 3, strict=False)
    assert tr.status is Status.BLOW_UP
    assert tr.iterations < 10_000
    assert np.all(np.isfinite(tr.x))


def test_solve_requires_enough_schedule_entries():
    with pytest.raises(ValueError, match="schedules"):
        solve(Zero(), ZeroMap(), Schedules(gamma=[1.0] * 5, lam=1.0), StoppingRule(max_iter=10),
              np.zeros(1))


def test_solve_rejects_nonfinite_start():
    with pytest.raises(ValueError):
        solve(Zero(), ZeroMap(), Schedules.constant(1.0, 1.0), StoppingRule(), [np.nan])


def test_solve_deterministic(desk):
    inst, P, B, beta = desk
    S = Schedules(gamma=beta, lam=1.2, a_err=decaying_noise(100, seed=1),
                  b_err=decaying_noise(100, seed=2))
    runs = [solve(P, B, S, StoppingRule(1e-6), np.zeros(100)) for _ in range(2)]
    assert runs[0].fingerprint() == runs[1].fingerprint()


def test_fpr_mode_residual_vanishes(desk):
    inst, P, B, beta = desk
    for g, lam in ((0.5, 1.0), (1.9, 1.0), (1.0, 1.4)):
        eps = 1e-7
        tr = solve(P, B, Schedules.constant(g * beta, lam),
                   StoppingRule(eps, mode=StopMode.FIXED_POINT_RESIDUAL), np.zeros(100),
                   store_iterates=False)
        assert tr.converged
        assert tr.final_residual <= 10 * eps


def quadratic_instance(rng, n):
    A = rng.normal(size=(n + 3, n))
    x_star = rng.normal(size=n)
    x_star *= 0.5 / np.abs(x_star).sum()
    return A, A @ x_star, x_star


def test_gradient_convergence_on_quadratics():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = int(rng.integers(2, 8))
        A, b, x_star = quadratic_instance(rng, n)
        B = LeastSquaresGradient(A, b)
        lam = rng.uniform(0.5, 1.4)
        tr = solve(L1BallIndicator(1.0), B, Schedules.constant(B.beta, lam),
                   StoppingRule(1e-8), np.zeros(n))
        assert tr.converged
        assert np.linalg.norm(B(tr.x) - B(x_star)) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 1.95), st.floats(0.05, 0.999))
def test_quasi_fejer_monotone_diagonal_metric(seed, gmult, lam_frac):
    rng = np.random.default_rng(seed)
    n = 4
    A, b, x_star = quadratic_instance(rng, n)
    B = LeastSquaresGradient(A, b)
    U = Diagonal(rng.uniform(0.3, 2.0, size=n))
    gamma = gmult * B.beta / U.norm
    lam = lam_frac * relaxation_upper_bound(B.beta, gamma, U.norm)
    tr = solve(L1BallIndicator(1.0), B, Schedules.constant(gamma, lam, U),
               StoppingRule(1e-9, max_iter=2000), rng.normal(size=n), reference=x_star)
    steps = np.diff(tr.dist)
    assert np.all(steps <= 1e-10)


def test_inexact_run_with_decaying_errors(desk):
    inst, P, B, beta = desk
    S = Schedules(gamma=beta, lam=1.0, a_err=decaying_noise(100, 0.1, 1),
                  b_err=decaying_noise(100, 0.1, 2))
    tr = solve(P, B, S, StoppingRule(1e-6), np.zeros(100), store_iterates=False)
    assert tr.converged
    assert fixed_point_residual(P, B, beta, I, tr.x) <= 1e-4


def test_finite_error_streams_not_read_past_the_end():
    B = LeastSquaresGradient(np.eye(2), np.ones(2))
    n = 5
    S = Schedules(gamma=[0.5] * n, lam=[1.0] * n, a_err=[np.zeros(2)] * n)
    tr = solve(Zero(), B, S, StoppingRule(1e-30, max_iter=n), np.zeros(2))
    assert tr.status is Status.MAX_ITER and tr.iterations == n
