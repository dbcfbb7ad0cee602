"""Mixture-of-experts margins and their normal scores.

Each summary statistic gets a conditional density f(s | theta): softmax
gates, linear expert means and log-linear expert variances.  The fitted CDF
maps s to a normal score that is standard normal when the margin is right.
"""
# %%
import numpy as np
from scipy import stats

from abcrde.moe import moe_cdf, select_moe

rng = np.random.default_rng(0)
theta = rng.uniform(-2, 2, size=(4000, 1))
branch = rng.uniform(size=4000) < 1 / (1 + np.exp(-3 * theta[:, 0]))
s = np.where(branch, theta[:, 0], -theta[:, 0]) + np.exp(0.2 * theta[:, 0]) * rng.normal(size=4000)

# %%
model, table = select_moe(theta, s, [1, 2, 3], seed=1)
for row in table:
    print(row)
print("chosen number of experts:", model.n_experts)

# %% [markdown]
# On fresh data the normal scores should pass a Kolmogorov-Smirnov test.

# %%
theta_new = rng.uniform(-2, 2, size=(2000, 1))
branch = rng.uniform(size=2000) < 1 / (1 + np.exp(-3 * theta_new[:, 0]))
s_new = (np.where(branch, theta_new[:, 0], -theta_new[:, 0])
         + np.exp(0.2 * theta_new[:, 0]) * rng.normal(size=2000))
u = model.normal_score(s_new, theta_new)
print("held-out KS p-value:", round(stats.kstest(u, "norm").pvalue, 3))
print("CDF at s=0 for theta=-1, 0, 1:",
      [round(float(moe_cdf(model, 0.0, np.array([t]))), 3) for t in (-1.0, 0.0, 1.0)])
