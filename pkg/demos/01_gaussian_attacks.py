# %% [markdown]
# # Optimal attacks on a Gaussian model
#
# A linear flow is a Gaussian N(mu, K).  For an l2 budget eps the most
# damaging perturbation has a closed form up to one scalar root, found here
# by bisection.

# %%
import numpy as np

from flowguard.gaussian import (
    GaussianParams,
    fit_gaussian_mle,
    gaussian_loglik,
    optimal_perturbation,
    spherical_perturbation,
    universal_defense_check,
    universal_perturbation,
)

rng = np.random.default_rng(0)
data = rng.multivariate_normal([1.0, -1.0], [[4.0, 1.2], [1.2, 1.0]], size=5000)
p = fit_gaussian_mle(data)
print("fitted mu", p.mu.round(3))
print("fitted K\n", p.cov.round(3))

# %% a sample-specific attack
x = data[0]
r = optimal_perturbation(p, x, eps=0.5)
print("delta", r.delta.round(4), "norm", np.linalg.norm(r.delta))
print("log-likelihood %.4f -> %.4f (drop %.4f nats)" % (r.loglik_before, r.loglik_after, r.drop))

# the attack beats any random direction of the same size
dirs = rng.standard_normal((2000, 2))
dirs = 0.5 * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
print("best random drop %.4f" % np.max(gaussian_loglik(p, x) - gaussian_loglik(p, x + dirs)))

# %% the hard case: attacking the mean itself
q = GaussianParams(np.zeros(2), np.diag([4.0, 1.0]))
h = optimal_perturbation(q, [0.0, 0.0], eps=2.0)
print("at the mean: delta", h.delta, "hard case", h.hard_case)  # eps times the low-variance axis

# %% spherical models: the attack points straight away from the mean
s = GaussianParams.spherical(np.zeros(2), 1.0)
print(spherical_perturbation(s, [3.0, 4.0], 1.0).delta)  # (0.6, 0.8)

# %% one perturbation for the whole population
u = universal_perturbation(p, 0.5)
print("universal delta", u.round(4))
rep = universal_defense_check(p, 0.5)
print("sensitivity before/after retraining on shifted data: %.6f / %.6f" % (rep.sensitivity_clean,
                                                                           rep.sensitivity_retrained))
