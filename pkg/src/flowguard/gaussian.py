"""Exact robustness theory for linear flows, i.e. Gaussian models N(mu, K).

Covers maximum-likelihood fitting, optimal l2 likelihood attacks (a
trust-region subproblem, including its hard case), closed-form adversarial
training of spherical models, the robustness/accuracy trade-off, the
high-probability bound on the number of adversarial training steps, and
universal perturbations.

Budget convention for the adversarial-training formulas: ``eps`` passed to
:func:`alpha_factor`, :func:`adv_train_closed_form`, :func:`adv_train_simulate`
and :func:`tradeoff_curve` is measured in units of the model's standard
deviation.  That is the reading under which the variance inflation factor is
the same at every round; at sigma = 1 it coincides with a raw budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    InsufficientDataError,
    InvalidInputError,
    InvalidModelError,
    UnsupportedModelError,
)
from .numerics import EigenDecomp, as_generator, bisect_decreasing, eigh, log_gamma

LOG_2PI = math.log(2.0 * math.pi)
RIDGE_TRIGGER = 1e-10
RIDGE_SCALE = 1e-8
SPHERICAL_RTOL = 1e-10


@dataclass(frozen=True)
class GaussianParams:
    mu: np.ndarray
    cov: np.ndarray
    _eig: EigenDecomp = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mu.size, mu.size):
            raise InvalidInputError(f"cov shape {cov.shape} does not match mean of length {mu.size}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)
        if self._eig is None:
            object.__setattr__(self, "_eig", eigh(cov))
        if not self._eig.eigenvalues[0] > 0:
            raise InvalidModelError(
                f"covariance is not positive definite (min eigenvalue {self._eig.eigenvalues[0]:.3g})"
            )

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def eig(self) -> EigenDecomp:
        return self._eig

    @property
    def is_spherical(self) -> bool:
        lam = self._eig.eigenvalues
        return bool(lam[-1] - lam[0] <= SPHERICAL_RTOL * lam[-1])

    @property
    def sigma2(self) -> float:
        if not self.is_spherical:
            raise UnsupportedModelError("covariance is not spherical")
        return float(np.mean(self._eig.eigenvalues))

    @classmethod
    def spherical(cls, mu, sigma2: float) -> "GaussianParams":
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        return cls(mu, sigma2 * np.eye(mu.size))

    def sample(self, count: int, rng) -> np.ndarray:
        g = as_generator(rng)
        u, lam = self._eig.eigenvectors, self._eig.eigenvalues
        return self.mu + (g.standard_normal((count, self.dim)) * np.sqrt(lam)) @ u.T


@dataclass(frozen=True)
class PerturbationResult:
    delta: np.ndarray
    x_adv: np.ndarray
    eta: float | None
    loglik_before: float
    loglik_after: float
    hard_case: bool
    solver_iters: int

    @property
    def drop(self) -> float:
        return self.loglik_before - self.loglik_after


@dataclass(frozen=True)
class AdvTrainSchedule:
    epsilon: float
    steps: int
    alpha: float

    @classmethod
    def make(cls, n: int, epsilon: float, steps: int) -> "AdvTrainSchedule":
        if steps < 0:
            raise InvalidInputError("steps must be >= 0")
        return cls(float(epsilon), int(steps), alpha_factor(n, epsilon))


@dataclass(frozen=True)
class TradeoffPoint:
    m: int
    l_nat: float
    l_nat_drop: float
    l_adv: float
    l_sen: float


def fit_gaussian_mle(samples) -> GaussianParams:
    """Sample mean and (1/N) sample covariance, with a small ridge when the
    covariance is numerically rank deficient."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {x.shape[0]}")
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / x.shape[0]
    cov = 0.5 * (cov + cov.T)
    n = cov.shape[0]
    scale = np.trace(cov) / n
    if scale <= 0:
        # all points identical
        cov = RIDGE_SCALE * np.eye(n)
        return GaussianParams(mu, cov)
    dec = eigh(cov)
    if dec.eigenvalues[0] < RIDGE_TRIGGER * scale:
        cov = cov + RIDGE_SCALE * scale * np.eye(n)
        dec = None
    return GaussianParams(mu, cov, dec)


def gaussian_loglik(p: GaussianParams, x) -> np.ndarray | float:
    """Log-density in nats; accepts one point or an ``(N, n)`` batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[-1] != p.dim:
        raise InvalidInputError(f"point dimension {xb.shape[-1]} != model dimension {p.dim}")
    lam, u = p.eig.eigenvalues, p.eig.eigenvectors
    proj = (xb - p.mu) @ u
    quad = np.sum(proj * proj / lam, axis=1)
    out = -0.5 * p.dim * LOG_2PI - 0.5 * np.sum(np.log(lam)) - 0.5 * quad
    return float(out[0]) if single else out


# -- optimal l2 attack ------------------------------------------------------


def _solve_shift(c2: np.ndarray, r: np.ndarray, eps: float) -> tuple[float, int]:
    """Solve sum_i c2_i / (s*r_i + r_i - 1)^2 = eps^2 for s > 0.

    ``s = 2*eta*lambda_min - 1`` and ``r_i = lambda_i / lambda_min`` so every
    denominator is nonnegative on the search region.  The function is strictly
    decreasing in s, infinite at 0 (caller guarantees weight on r == 1) and
    bounded by ||c||^2 / s^2, hence the root lies in (0, ||c|| / eps].
    """
    e2 = eps * eps
    iters = 0

    def g(s):
        nonlocal iters
        iters += 1
        d = s * r + (r - 1.0)
        return float(np.sum(c2 / (d * d))) / e2 - 1.0

    hi = math.sqrt(float(np.sum(c2))) / eps
    # lower end where g is certainly positive: the min-eigenspace term alone
    c_min = math.sqrt(float(np.sum(c2[r == 1.0])))
    lo = c_min / eps * 0.5
    if g(hi) >= 0:
        return hi, iters
    # bisect in log(s): s spans many orders of magnitude near the pole
    t = bisect_decreasing(lambda v: g(math.exp(v)), math.log(lo), math.log(hi), tol=1e-15)
    s = math.exp(t)
    # polish with a few Newton steps on the residual of the norm equation
    for _ in range(5):
        d = s * r + (r - 1.0)
        val = float(np.sum(c2 / d**2)) - e2
        der = float(np.sum(-2.0 * c2 * r / d**3))
        if der == 0.0:
            break
        step = val / der
        s_new = s - step
        if not s_new > 0:
            break
        s = s_new
        iters += 1
        if abs(step) <= 1e-16 * s:
            break
    return s, iters


def optimal_perturbation(p: GaussianParams, x, eps: float) -> PerturbationResult:
    """Perturbation of l2 norm ``eps`` that minimizes the log-likelihood of ``x``.

    Works in the eigenbasis of K with ``c = U^T (mu - x)``.  The Lagrange
    multiplier eta must satisfy ``2*eta*lambda_i >= 1``; in the hard case
    (no weight on the smallest eigenvalue and the norm equation has no root
    there) eta sits on the boundary and the remaining norm is filled along
    the min-eigenvalue eigenvector.
    """
    if not eps > 0:
        raise InvalidInputError("eps must be positive")
    x = np.asarray(x, dtype=float)
    if x.shape != (p.dim,):
        raise InvalidInputError(f"x must have shape ({p.dim},)")
    lam, u = p.eig.eigenvalues, p.eig.eigenvectors
    lam_min = lam[0]
    r = lam / lam_min
    r[np.abs(r - 1.0) <= 4 * np.finfo(float).eps] = 1.0
    in_min = r == 1.0
    c = u.T @ (p.mu - x)
    c2 = c * c
    cnorm = math.sqrt(float(np.sum(c2)))
    c_min = math.sqrt(float(np.sum(c2[in_min])))
    hard = False
    iters = 0
    if c_min <= 1e-14 * max(cnorm, eps):
        # boundary value of the norm equation with the min-eigenspace weight removed
        rest = ~in_min
        d0 = r[rest] - 1.0
        g0 = float(np.sum(c2[rest] / d0**2)) if rest.any() else 0.0
        if g0 <= eps * eps:
            hard = True
            dt = np.zeros_like(c)
            dt[rest] = c[rest] / (1.0 - r[rest])
            pad = math.sqrt(max(eps * eps - g0, 0.0))
            dt[np.flatnonzero(in_min)[0]] = pad
            eta = 1.0 / (2.0 * lam_min)
        else:
            c = c.copy()
            c[in_min] = 0.0
            c2 = c * c
    if not hard:
        if c_min <= 1e-14 * max(cnorm, eps):
            # root lies strictly inside the region; bracket away from the pole
            s = _solve_hard_adjacent(c2, r, eps)
        else:
            s, iters = _solve_shift(c2, r, eps)
        eta = (1.0 + s) / (2.0 * lam_min)
        dt = c / (1.0 - (s * r + r))
    delta = u @ dt
    x_adv = x + delta
    return PerturbationResult(
        delta=delta,
        x_adv=x_adv,
        eta=float(eta),
        loglik_before=gaussian_loglik(p, x),
        loglik_after=gaussian_loglik(p, x_adv),
        hard_case=hard,
        solver_iters=iters,
    )


def _solve_hard_adjacent(c2, r, eps) -> float:
    e2 = eps * eps

    def g(s):
        d = s * r + (r - 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(c2 > 0, c2 / (d * d), 0.0)
        return float(np.sum(terms)) / e2 - 1.0

    return bisect_decreasing(g, 0.0, math.sqrt(float(np.sum(c2))) / eps + 1.0, tol=1e-15)


def optimal_perturbation_batch(p: GaussianParams, x, eps: float, iters: int = 120) -> np.ndarray:
    """Vectorized :func:`optimal_perturbation` returning only the deltas.

    All rows bisect at once, on ``log s`` for regular rows and on ``s`` for
    rows without weight on the min eigenspace; hard-case rows are completed
    along the min-eigenvalue direction.
    """
    if not eps > 0:
        raise InvalidInputError("eps must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lam, u = p.eig.eigenvalues, p.eig.eigenvectors
    r = lam / lam[0]
    r[np.abs(r - 1.0) <= 4 * np.finfo(float).eps] = 1.0
    in_min = r == 1.0
    e2 = eps * eps
    c = (p.mu - x) @ u
    c2 = c * c
    cnorm = np.sqrt(c2.sum(axis=1))
    c_min = np.sqrt(c2[:, in_min].sum(axis=1))
    degenerate = c_min <= 1e-14 * np.maximum(cnorm, eps)
    c = np.where(degenerate[:, None] & in_min, 0.0, c)
    c2 = c * c
    rm1 = np.where(in_min, 1.0, r - 1.0)
    g0 = np.where(degenerate, np.sum(np.where(in_min, 0.0, c2 / rm1**2), axis=1), np.inf)
    hard = degenerate & (g0 <= e2)

    def excess(s):
        d = s[:, None] * r + (r - 1.0)
        d = np.where(c2 > 0, d, 1.0)
        return np.sum(c2 / (d * d), axis=1) - e2

    # regular rows: s in [c_min/(2 eps), ||c||/eps], bisected geometrically
    lo = np.log(np.maximum(c_min, 1e-300) / eps * 0.5)
    hi = np.log(np.maximum(cnorm, 1e-300) / eps)
    # degenerate rows: s in [0, ||c||/eps + 1], bisected linearly
    lo = np.where(degenerate, 0.0, lo)
    hi = np.where(degenerate, np.maximum(cnorm, 1e-300) / eps + 1.0, hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        s = np.where(degenerate, mid, np.exp(mid))
        pos = excess(s) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    mid = 0.5 * (lo + hi)
    s = np.where(hard, 0.0, np.where(degenerate, mid, np.exp(mid)))
    d = s[:, None] * r + (r - 1.0)
    dt = np.where(c2 > 0, -c / np.where(c2 > 0, d, 1.0), 0.0)
    if hard.any():
        dt[hard, np.flatnonzero(in_min)[0]] = np.sqrt(np.maximum(e2 - g0[hard], 0.0))
    return dt @ u.T


def spherical_perturbation(p: GaussianParams, x, eps: float) -> PerturbationResult:
    """Closed form for K = sigma^2 I: push ``x`` radially away from the mean."""
    if not p.is_spherical:
        raise UnsupportedModelError("spherical_perturbation needs K = sigma^2 I")
    x = np.asarray(x, dtype=float)
    diff = x - p.mu
    norm = float(np.linalg.norm(diff))
    if norm == 0.0:
        raise InvalidInputError("x equals the mean; use optimal_perturbation for the hard case")
    delta = eps * diff / norm
    x_adv = x + delta
    return PerturbationResult(
        delta=delta,
        x_adv=x_adv,
        eta=(1.0 + norm / eps) / (2.0 * p.sigma2),
        loglik_before=gaussian_loglik(p, x),
        loglik_after=gaussian_loglik(p, x_adv),
        hard_case=False,
        solver_iters=0,
    )


def kkt_residual(p: GaussianParams, x, res: PerturbationResult) -> tuple[float, float]:
    """Stationarity residual and worst second-order slack ``min(2 eta lambda_i - 1)``."""
    kinv = np.linalg.inv(p.cov)
    lhs = (kinv - 2.0 * res.eta * np.eye(p.dim)) @ res.delta
    rhs = kinv @ (p.mu - np.asarray(x, dtype=float))
    slack = float(np.min(2.0 * res.eta * p.eig.eigenvalues - 1.0))
    return float(np.linalg.norm(lhs - rhs)), slack


def universal_perturbation(p: GaussianParams, eps: float) -> np.ndarray:
    return eps * p.eig.min_vector


# -- adversarial training of spherical models -------------------------------


def chi_mean_ratio(n: int) -> float:
    """Gamma((n+1)/2) / Gamma(n/2)."""
    return math.exp(log_gamma((n + 1) / 2.0) - log_gamma(n / 2.0))


def alpha_factor(n: int, eps: float) -> float:
    """Per-round variance inflation of a spherical model under optimal l2 attacks."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if eps < 0:
        raise InvalidInputError("eps must be >= 0")
    return 2.0 * math.sqrt(2.0) * eps / n * chi_mean_ratio(n) + eps * eps / n


def adv_train_closed_form(p: GaussianParams, sched: AdvTrainSchedule) -> GaussianParams:
    if not p.is_spherical:
        raise UnsupportedModelError("closed-form adversarial training is only derived for K = sigma^2 I")
    factor = (1.0 + sched.alpha) ** sched.steps
    return GaussianParams.spherical(p.mu, p.sigma2 * factor)


def adv_train_simulate(
    p: GaussianParams,
    eps: float,
    m: int,
    samples: int,
    rng,
    relative: bool = True,
) -> GaussianParams:
    """Monte Carlo adversarial training: ``m`` rounds of sample, attack, refit.

    With ``relative=True`` the attack budget each round is ``eps`` times the
    current model's scale ``sqrt(trace(K)/n)``; with ``relative=False`` it is
    the raw ``eps`` every round.
    """
    g = as_generator(rng)
    cur = p
    for _ in range(m):
        x = cur.sample(samples, g)
        budget = eps * math.sqrt(np.trace(cur.cov) / cur.dim) if relative else eps
        if budget > 0:
            x = x + optimal_perturbation_batch(cur, x, budget)
        cur = fit_gaussian_mle(x)
    return cur


def _l_nat(n, sigma2, growth):
    return -0.5 * n * math.log(2.0 * math.pi * sigma2 * growth) - n / (2.0 * growth)


def tradeoff_curve(p: GaussianParams, eps: float, m_max: int) -> list[TradeoffPoint]:
    """Natural-likelihood drop and adversarial sensitivity for m = 0..m_max rounds."""
    if m_max < 0:
        raise InvalidInputError("m_max must be >= 0")
    n = p.dim
    sigma2 = p.sigma2
    alpha = alpha_factor(n, eps)
    attack = 2.0 * eps * math.sqrt(2.0) * chi_mean_ratio(n) + eps * eps
    base = _l_nat(n, sigma2, 1.0)
    out = []
    for m in range(m_max + 1):
        growth = (1.0 + alpha) ** m
        l_nat = _l_nat(n, sigma2, growth)
        l_adv = -0.5 * n * math.log(2.0 * math.pi * sigma2 * growth) - (n + attack) / (2.0 * growth)
        out.append(
            TradeoffPoint(
                m=m,
                l_nat=l_nat,
                l_nat_drop=base - l_nat,
                l_adv=l_adv,
                l_sen=l_nat - l_adv,
            )
        )
    return out


def tradeoff_monte_carlo(p: GaussianParams, eps: float, m_max: int, samples: int, rng) -> list[TradeoffPoint]:
    """Sample-average counterpart of :func:`tradeoff_curve`.

    Data are drawn from ``p``; the model after ``m`` rounds is ``p`` with its
    variance inflated by (1 + alpha)^m and is attacked with budget
    ``eps * sigma`` (the same relative budget the closed form uses).
    """
    if not p.is_spherical:
        raise UnsupportedModelError("the trade-off curve is only derived for K = sigma^2 I")
    g = as_generator(rng)
    x = p.sample(samples, g)
    alpha = alpha_factor(p.dim, eps)
    budget = eps * math.sqrt(p.sigma2)
    out, base = [], None
    for m in range(m_max + 1):
        model = GaussianParams.spherical(p.mu, p.sigma2 * (1.0 + alpha) ** m)
        delta = optimal_perturbation_batch(model, x, budget)
        l_nat = float(np.mean(gaussian_loglik(model, x)))
        l_adv = float(np.mean(gaussian_loglik(model, x + delta)))
        base = l_nat if base is None else base
        out.append(TradeoffPoint(m=m, l_nat=l_nat, l_nat_drop=base - l_nat, l_adv=l_adv, l_sen=l_nat - l_adv))
    return out


def nat_drop_formula(n: int, alpha: float, m: int) -> float:
    g = (1.0 + alpha) ** m
    return 0.5 * n * (math.log(g) + 1.0 / g - 1.0)


def sensitivity_formula(n: int, eps: float, alpha: float, m: int) -> float:
    return (2.0 * eps * math.sqrt(2.0) * chi_mean_ratio(n) + eps * eps) / (2.0 * (1.0 + alpha) ** m)


# -- high-probability robustness after m rounds ------------------------------


def chi_square_tail_bound(n: int, t: float) -> float:
    """Upper bound on P(X >= 2tn) for X ~ chi^2(n), valid for t > 1."""
    if not t > 1:
        raise InvalidInputError("t must exceed 1")
    return math.exp(-t * n / 10.0)


def robust_steps_real(sigma, eps, delta_tol, gamma, n) -> float:
    if min(sigma, eps, delta_tol) <= 0 or not 0 < gamma < 1 or n < 1:
        raise InvalidInputError("sigma, eps, delta_tol must be positive, gamma in (0,1), n >= 1")
    alpha = alpha_factor(n, eps / sigma)
    scale = 1.0 / (2.0 * sigma**2 * delta_tol)
    a = scale * (2.0 * sigma * eps * math.sqrt(20.0 * math.log(1.0 / gamma)) + eps**2)
    b = scale * (2.0 * sigma * eps * math.sqrt(2.0 * n) + eps**2)
    return max(math.log(a), math.log(b), 0.0) / math.log1p(alpha)


def robust_steps_bound(sigma: float, eps: float, delta_tol: float, gamma: float, n: int) -> int:
    """Rounds of adversarial training after which an l2 attack of size ``eps``
    drops the log-likelihood by less than ``delta_tol`` with probability at
    least ``1 - gamma``.  Zero when the bound is already met without training.
    """
    return int(math.ceil(robust_steps_real(sigma, eps, delta_tol, gamma, n) - 1e-12))


def certify_monte_carlo(sigma: float, eps: float, delta_tol: float, n: int, m: int, draws: int, rng) -> np.ndarray:
    """Log-likelihood drops under the optimal l2 attack after ``m`` rounds.

    Data come from N(0, sigma^2 I); the defended model is the closed-form
    result N(0, sigma^2 (1 + alpha)^m I) with alpha = alpha_factor(n, eps/sigma).
    Returns one drop per draw; compare against ``delta_tol``.
    """
    if draws < 1:
        raise InvalidInputError("draws must be >= 1")
    g = as_generator(rng)
    alpha = alpha_factor(n, eps / sigma)
    model = GaussianParams.spherical(np.zeros(n), sigma**2 * (1.0 + alpha) ** m)
    x = sigma * g.standard_normal((draws, n))
    delta = optimal_perturbation_batch(model, x, eps)
    return gaussian_loglik(model, x) - gaussian_loglik(model, x + delta)


# -- universal perturbation -------------------------------------------------


@dataclass(frozen=True)
class UniversalDefenseReport:
    delta: np.ndarray
    retrained: GaussianParams
    mean_shift: np.ndarray
    u_min_clean: np.ndarray
    u_min_retrained: np.ndarray
    sensitivity_clean: float
    sensitivity_retrained: float

    @property
    def same_direction(self) -> bool:
        return bool(np.allclose(self.u_min_clean, self.u_min_retrained, atol=1e-12))

    @property
    def defense_fails(self) -> bool:
        return self.same_direction and abs(self.sensitivity_clean - self.sensitivity_retrained) <= 1e-12 * max(
            1.0, abs(self.sensitivity_clean)
        )

    def to_dict(self) -> dict:
        return {
            "delta": self.delta.tolist(),
            "mean_shift": self.mean_shift.tolist(),
            "u_min_clean": self.u_min_clean.tolist(),
            "u_min_retrained": self.u_min_retrained.tolist(),
            "sensitivity_clean": self.sensitivity_clean,
            "sensitivity_retrained": self.sensitivity_retrained,
            "same_direction": self.same_direction,
            "defense_fails": self.defense_fails,
        }


def universal_sensitivity(p: GaussianParams, delta) -> float:
    """Expected log-likelihood drop over the model's own population when every
    sample is shifted by ``delta``."""
    delta = np.asarray(delta, dtype=float)
    proj = p.eig.eigenvectors.T @ delta
    return 0.5 * float(np.sum(proj * proj / p.eig.eigenvalues))


def universal_defense_check(p: GaussianParams, eps: float) -> UniversalDefenseReport:
    """Retrain on universally perturbed data and compare attack sensitivity.

    The shifted population has mean ``mu + delta`` and unchanged covariance, so
    the retrained model is attacked by the same direction with the same effect.
    """
    delta = universal_perturbation(p, eps)
    retrained = GaussianParams(p.mu + delta, p.cov, p.eig)
    delta2 = universal_perturbation(retrained, eps)
    return UniversalDefenseReport(
        delta=delta,
        retrained=retrained,
        mean_shift=retrained.mu - p.mu,
        u_min_clean=p.eig.min_vector,
        u_min_retrained=retrained.eig.min_vector,
        sensitivity_clean=universal_sensitivity(p, delta),
        sensitivity_retrained=universal_sensitivity(retrained, delta2),
    )


def with_cov(p: GaussianParams, cov) -> GaussianParams:
    return replace(p, cov=np.asarray(cov, dtype=float), _eig=None)
