import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import gaussian_logpdf, random_spd, sphere_min_loglik

from flowguard.errors import (
    InsufficientDataError,
    InvalidInputError,
    InvalidModelError,
    UnsupportedModelError,
)
from flowguard.gaussian import (
    AdvTrainSchedule,
    GaussianParams,
    adv_train_closed_form,
    adv_train_simulate,
    alpha_factor,
    certify_monte_carlo,
    chi_square_tail_bound,
    fit_gaussian_mle,
    gaussian_loglik,
    kkt_residual,
    nat_drop_formula,
    optimal_perturbation,
    optimal_perturbation_batch,
    robust_steps_bound,
    robust_steps_real,
    sensitivity_formula,
    spherical_perturbation,
    tradeoff_curve,
    tradeoff_monte_carlo,
    universal_defense_check,
    universal_perturbation,
)

# -- fitting and density ------------------------------------------------------


def test_fit_symmetric_layout():
    p = fit_gaussian_mle([[0, 0], [2, 0], [0, 2], [2, 2]])
    np.testing.assert_allclose(p.mu, [1, 1])
    np.testing.assert_allclose(p.cov, np.eye(2))


def test_fit_degenerate_uses_ridge():
    p = fit_gaussian_mle(np.tile([1.0, 2.0], (5, 1)))
    assert p.eig.eigenvalues[0] > 0
    np.testing.assert_allclose(p.cov, p.cov[0, 0] * np.eye(2))


def test_fit_rank_deficient_line_gets_ridge():
    t = np.linspace(-1, 1, 50)
    p = fit_gaussian_mle(np.stack([t, 2 * t], axis=1))
    scale = np.trace(p.cov) / 2
    assert p.eig.eigenvalues[0] == pytest.approx(1e-8 * (scale - 0.5e-8 * scale), rel=1e-3)


def test_fit_needs_two_samples():
    with pytest.raises(InsufficientDataError):
        fit_gaussian_mle([[1.0, 2.0]])


def test_fit_monte_carlo_consistency():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((100_000, 2)) * [2.0, 1.0]
    p = fit_gaussian_mle(x)
    np.testing.assert_allclose(p.cov, np.diag([4.0, 1.0]), atol=0.05)


def test_loglik_standard_mode():
    p = GaussianParams(np.zeros(2), np.eye(2))
    assert gaussian_loglik(p, [0, 0]) == pytest.approx(-math.log(2 * math.pi), rel=1e-14)
    assert gaussian_loglik(p, [1, 0]) == pytest.approx(-math.log(2 * math.pi) - 0.5, rel=1e-14)


def test_loglik_against_scipy():
    p = GaussianParams([1.0, 1.0], np.diag([4.0, 1.0]))
    # frozen from scipy.stats.multivariate_normal
    assert gaussian_loglik(p, [3, 2]) == pytest.approx(-3.5310242469692907, rel=1e-13)
    rng = np.random.default_rng(1)
    k = random_spd(rng, 4)
    mu = rng.standard_normal(4)
    x = rng.standard_normal((7, 4))
    np.testing.assert_allclose(gaussian_loglik(GaussianParams(mu, k), x), gaussian_logpdf(mu, k, x), rtol=1e-12)


def test_non_pd_covariance_rejected():
    with pytest.raises(InvalidModelError):
        GaussianParams(np.zeros(2), np.diag([1.0, -1.0]))


# -- optimal attack -----------------------------------------------------------


def test_identity_reduces_to_spherical():
    r = optimal_perturbation(GaussianParams(np.zeros(2), np.eye(2)), [3.0, 4.0], 1.0)
    np.testing.assert_allclose(r.delta, [0.6, 0.8], atol=1e-12)
    assert not r.hard_case


def test_hard_case_at_mean():
    p = GaussianParams(np.zeros(2), np.diag([4.0, 1.0]))
    r = optimal_perturbation(p, [0.0, 0.0], 2.0)
    assert r.hard_case
    np.testing.assert_allclose(np.abs(r.delta), [0.0, 2.0], atol=1e-15)
    assert r.eta == pytest.approx(0.5)


def test_general_case_matches_brute_force():
    p = GaussianParams(np.zeros(2), np.diag([4.0, 1.0]))
    r = optimal_perturbation(p, [1.0, 1.0], 0.5)
    # frozen: sphere-grid minimum of L(x + delta), 1e6 angles + bounded refinement
    assert r.loglik_after <= -3.792320093968117 + 1e-3
    assert r.loglik_after == pytest.approx(-3.792320093968117, abs=1e-9)


def test_hard_case_with_off_axis_point():
    # c has no weight on u_min and the norm equation has no root: pad along u_min
    p = GaussianParams(np.zeros(2), np.diag([4.0, 1.0]))
    x = np.array([0.1, 0.0])
    r = optimal_perturbation(p, x, 1.0)
    assert r.hard_case
    assert np.linalg.norm(r.delta) == pytest.approx(1.0, rel=1e-12)
    assert r.loglik_after <= sphere_min_loglik(p.mu, p.cov, x, 1.0) + 1e-9


def test_no_weight_on_u_min_but_root_exists():
    p = GaussianParams(np.zeros(2), np.diag([4.0, 1.0]))
    x = np.array([3.0, 0.0])
    r = optimal_perturbation(p, x, 0.5)
    assert not r.hard_case
    np.testing.assert_allclose(r.delta, [0.5, 0.0], atol=1e-12)


def test_repeated_min_eigenvalue():
    p = GaussianParams(np.zeros(3), np.diag([2.0, 1.0, 1.0]))
    x = np.array([0.3, 0.4, -0.2])
    r = optimal_perturbation(p, x, 0.7)
    assert np.linalg.norm(r.delta) == pytest.approx(0.7, rel=1e-12)
    assert r.loglik_after <= sphere_min_loglik(p.mu, p.cov, x, 0.7) + 1e-6


def _random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    k = random_spd(rng, n)
    mu = rng.standard_normal(n)
    x = mu + rng.standard_normal(n) * rng.uniform(0.01, 2.0)
    eps = float(rng.uniform(0.05, 2.0))
    return GaussianParams(mu, k), x, eps


@pytest.mark.parametrize("seed", range(12))
def test_optimality_against_grid(seed):
    p, x, eps = _random_instance(seed)
    r = optimal_perturbation(p, x, eps)
    assert r.loglik_after <= sphere_min_loglik(p.mu, p.cov, x, eps, grid=200_000) + 1e-3


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_kkt_and_active_constraint(seed):
    p, x, eps = _random_instance(seed)
    r = optimal_perturbation(p, x, eps)
    res, slack = kkt_residual(p, x, r)
    assert res <= 1e-8 * max(1.0, np.linalg.norm(np.linalg.inv(p.cov) @ (p.mu - x)))
    assert slack >= -1e-10
    assert abs(np.linalg.norm(r.delta) - eps) <= 1e-9 * eps
    assert r.loglik_after <= r.loglik_before


def test_batch_matches_scalar_solver():
    rng = np.random.default_rng(7)
    k = random_spd(rng, 3)
    p = GaussianParams(rng.standard_normal(3), k)
    x = p.mu + rng.standard_normal((40, 3))
    x[0] = p.mu  # hard case row
    d = optimal_perturbation_batch(p, x, 0.8)
    for i in range(40):
        r = optimal_perturbation(p, x[i], 0.8)
        if i == 0:
            # equally optimal up to the sign of u_min
            assert np.linalg.norm(d[i]) == pytest.approx(0.8, rel=1e-12)
            continue
        np.testing.assert_allclose(d[i], r.delta, atol=1e-9)


def test_invalid_eps():
    with pytest.raises(InvalidInputError):
        optimal_perturbation(GaussianParams(np.zeros(2), np.eye(2)), [1, 0], 0.0)


# -- spherical closed form -------------------------------------------------------


def test_spherical_closed_form():
    p = GaussianParams.spherical(np.zeros(2), 1.0)
    np.testing.assert_allclose(spherical_perturbation(p, [3, 4], 1.0).delta, [0.6, 0.8])
    q = GaussianParams.spherical([1.0, 0.0], 1.0)
    np.testing.assert_allclose(spherical_perturbation(q, [1, 2], 0.5).delta, [0.0, 0.5])


def test_spherical_needs_x_off_mean():
    with pytest.raises(InvalidInputError):
        spherical_perturbation(GaussianParams.spherical(np.zeros(2), 1.0), [0, 0], 1.0)


def test_spherical_rejects_general_covariance():
    with pytest.raises(UnsupportedModelError):
        spherical_perturbation(GaussianParams(np.zeros(2), np.diag([2.0, 1.0])), [1, 1], 1.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_spherical_agrees_with_general(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    p = GaussianParams.spherical(rng.standard_normal(n), float(rng.uniform(0.1, 5)))
    x = p.mu + rng.standard_normal(n)
    eps = float(rng.uniform(0.01, 3))
    np.testing.assert_allclose(
        spherical_perturbation(p, x, eps).delta, optimal_perturbation(p, x, eps).delta, atol=1e-6
    )


# -- universal perturbation ------------------------------------------------------


def test_universal_axis():
    np.testing.assert_allclose(universal_perturbation(GaussianParams(np.zeros(2), np.diag([2.0, 1.0])), 0.5), [0, 0.5])


def test_universal_isotropic_convention():
    np.testing.assert_allclose(universal_perturbation(GaussianParams(np.zeros(3), np.eye(3)), 1.0), [1, 0, 0])


def test_universal_rotated():
    d = universal_perturbation(GaussianParams(np.zeros(2), [[2.0, 1.0], [1.0, 2.0]]), 1.0)
    # Monte Carlo over the unit circle picks +-(1,-1)/sqrt(2) (drop 0.4986 vs 0.1667 for (1,1)/sqrt(2))
    np.testing.assert_allclose(d, np.array([1.0, -1.0]) / math.sqrt(2), atol=1e-12)


def test_universal_defense_check():
    rep = universal_defense_check(GaussianParams(np.zeros(2), np.diag([2.0, 1.0])), 0.5)
    np.testing.assert_allclose(rep.u_min_retrained, [0.0, 1.0])
    np.testing.assert_array_equal(rep.mean_shift, 0.5 * rep.u_min_clean)
    assert abs(rep.sensitivity_clean - rep.sensitivity_retrained) <= 1e-12
    assert rep.sensitivity_clean == pytest.approx(0.25 / 2)
    assert rep.defense_fails


# -- adversarial training -----------------------------------------------------------


def test_alpha_values():
    assert alpha_factor(3, 0.0) == 0.0
    assert alpha_factor(2, 1.0) == pytest.approx(math.sqrt(2) * math.sqrt(math.pi) / 2 + 0.5, rel=1e-14)
    assert alpha_factor(2, 1.0) == pytest.approx(1.75331, abs=1e-5)
    assert alpha_factor(1, 1.0) == pytest.approx(2 * math.sqrt(2) / math.sqrt(math.pi) + 1, rel=1e-14)
    assert alpha_factor(1, 1.0) == pytest.approx(2.59577, abs=1e-5)


@pytest.mark.parametrize("n,frozen", [(1, 2.5980069844312834), (2, 1.7527556771077148)])
def test_alpha_monte_carlo(n, frozen):
    # frozen: trace E[(z + z/|z|)(z + z/|z|)^T]/n - 1 over 2e6 normal draws
    assert alpha_factor(n, 1.0) == pytest.approx(frozen, rel=0.01)


def test_closed_form_training():
    p = GaussianParams.spherical(np.zeros(2), 1.0)
    same = adv_train_closed_form(p, AdvTrainSchedule.make(2, 1.0, 0))
    np.testing.assert_allclose(same.cov, p.cov)
    one = adv_train_closed_form(p, AdvTrainSchedule.make(2, 1.0, 1))
    assert one.sigma2 == pytest.approx(2.75331, abs=1e-5)
    three = adv_train_closed_form(p, AdvTrainSchedule.make(2, 1.0, 3))
    assert three.sigma2 == pytest.approx((1 + alpha_factor(2, 1.0)) ** 3, rel=1e-14)
    np.testing.assert_array_equal(three.mu, p.mu)


def test_closed_form_requires_spherical():
    with pytest.raises(UnsupportedModelError):
        adv_train_closed_form(GaussianParams(np.zeros(2), np.diag([2.0, 1.0])), AdvTrainSchedule.make(2, 1.0, 1))


def test_simulate_zero_budget_only_sampling_noise():
    p = GaussianParams.spherical([1.0, -1.0], 1.0)
    q = adv_train_simulate(p, 0.0, 1, 20_000, 3)
    assert np.linalg.norm(q.mu - p.mu) <= 5 / math.sqrt(20_000) * math.sqrt(2)


def test_simulate_one_round_matches_closed_form():
    p = GaussianParams.spherical(np.zeros(2), 1.0)
    q = adv_train_simulate(p, 1.0, 1, 200_000, 4)
    target = 1 + alpha_factor(2, 1.0)
    np.testing.assert_allclose(np.diag(q.cov), [target, target], rtol=0.02)
    assert np.linalg.norm(q.mu) <= 0.05


def test_simulate_relative_budget_is_scale_free():
    p = GaussianParams.spherical(np.zeros(3), 4.0)
    q = adv_train_simulate(p, 0.5, 1, 200_000, 5)
    np.testing.assert_allclose(np.trace(q.cov) / 3, 4.0 * (1 + alpha_factor(3, 0.5)), rtol=0.02)


# -- trade-off ---------------------------------------------------------------------


def test_tradeoff_starts_at_zero_drop():
    pts = tradeoff_curve(GaussianParams.spherical(np.zeros(4), 1.0), 0.5, 3)
    assert pts[0].l_nat_drop == 0.0
    for pt in pts:
        assert pt.l_sen == pytest.approx(pt.l_nat - pt.l_adv)


def test_tradeoff_sensitivity_at_zero():
    pts = tradeoff_curve(GaussianParams.spherical(np.zeros(2), 1.0), 1.0, 0)
    assert pts[0].l_sen == pytest.approx(1.75331, abs=1e-5)
    assert pts[0].l_sen == pytest.approx(alpha_factor(2, 1.0) * 2 / 2, rel=1e-14)


def test_tradeoff_matches_written_formulas():
    n, eps = 10, 0.7
    a = alpha_factor(n, eps)
    for pt in tradeoff_curve(GaussianParams.spherical(np.ones(n), 2.0), eps, 10):
        assert pt.l_nat_drop == pytest.approx(nat_drop_formula(n, a, pt.m), rel=1e-12, abs=1e-14)
        assert pt.l_sen == pytest.approx(sensitivity_formula(n, eps, a, pt.m), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 50), eps=st.floats(0.01, 5.0), m=st.integers(0, 30))
def test_tradeoff_monotone_property(n, eps, m):
    a = alpha_factor(n, eps)
    assert nat_drop_formula(n, a, m + 1) > nat_drop_formula(n, a, m)
    assert sensitivity_formula(n, eps, a, m + 1) < sensitivity_formula(n, eps, a, m)


# -- high-probability bound -----------------------------------------------------------


def test_tail_bound_values():
    assert chi_square_tail_bound(10, 1.0 + 1e-9) == pytest.approx(math.exp(-1), rel=1e-8)
    assert chi_square_tail_bound(5, 2.0) == pytest.approx(math.exp(-1), rel=1e-14)
    with pytest.raises(InvalidInputError):
        chi_square_tail_bound(5, 1.0)


def test_tail_bound_monte_carlo():
    rng = np.random.default_rng(8)
    x = rng.chisquare(8, size=2_000_000)
    assert np.mean(x >= 32) <= chi_square_tail_bound(8, 2.0)


def test_robust_steps_vacuous():
    assert robust_steps_bound(1.0, 1.0, 1e9, 0.05, 4) == 0


def test_robust_steps_formula():
    a = alpha_factor(4, 1.0)
    t1 = math.log((2 * math.sqrt(20 * math.log(20)) + 1) / 0.2)
    t2 = math.log((2 * math.sqrt(8) + 1) / 0.2)
    assert robust_steps_real(1.0, 1.0, 0.1, 0.05, 4) == pytest.approx(max(t1, t2) / math.log(1 + a), rel=1e-14)
    assert robust_steps_bound(1.0, 1.0, 0.1, 0.05, 4) == 6


@settings(max_examples=60, deadline=None)
@given(g1=st.floats(1e-6, 0.99), g2=st.floats(1e-6, 0.99), n=st.integers(1, 30), d=st.floats(1e-3, 10))
def test_robust_steps_monotone_in_gamma(g1, g2, n, d):
    lo, hi = sorted([g1, g2])
    assert robust_steps_bound(1.0, 0.5, d, lo, n) >= robust_steps_bound(1.0, 0.5, d, hi, n)


def test_certify_drops_match_radial_formula():
    # spherical model: the attack is radial, so the drop is (2 eps r + eps^2) / (2 s^2)
    sigma, eps, n, m = 1.3, 0.4, 3, 2
    drops = certify_monte_carlo(sigma, eps, 0.1, n, m, 2000, rng=np.random.default_rng(4))
    x = sigma * np.random.default_rng(4).standard_normal((2000, n))
    s2 = sigma**2 * (1 + alpha_factor(n, eps / sigma)) ** m
    r = np.linalg.norm(x, axis=1)
    np.testing.assert_allclose(drops, (2 * eps * r + eps**2) / (2 * s2), rtol=1e-9)


def test_certify_rejects_zero_draws():
    with pytest.raises(InvalidInputError):
        certify_monte_carlo(1.0, 1.0, 0.1, 2, 1, 0, rng=0)


def test_tradeoff_monte_carlo_tracks_closed_form():
    p = GaussianParams.spherical(np.zeros(4), 2.0)
    mc = tradeoff_monte_carlo(p, 0.5, 3, 100_000, rng=1)
    cf = tradeoff_curve(p, 0.5, 3)
    for a, b in zip(mc, cf):
        assert a.m == b.m
        assert a.l_nat_drop == pytest.approx(b.l_nat_drop, rel=0.02, abs=0.01)
        assert a.l_sen == pytest.approx(b.l_sen, rel=0.02)
