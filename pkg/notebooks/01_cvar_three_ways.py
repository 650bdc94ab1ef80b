# %% [markdown]
# # CVaR three ways
#
# The mean of the worst alpha-fraction of losses can be computed directly,
# as a one-dimensional minimisation over a threshold, or as a worst-case
# reweighting. This script checks they agree, splits the same quantity across
# subpopulations, and looks at how fast the empirical estimate's bias shrinks.

# %%
import numpy as np

from s2m.core_math import Rng, avg_top
from s2m.cvar import (
    SubpopIndex,
    agnostic_topk_decomposition,
    bernoulli_sampler,
    cvar_bias_study,
    cvar_closed_form,
    cvar_dual,
    cvar_variational,
    uniform_sampler,
)

u = Rng(0).random(12) * 5.0
alpha = 0.25
print("losses", np.round(u, 3))
print("closed form ", cvar_closed_form(u, alpha).value)
print("variational ", cvar_variational(u, alpha).value)
print("dual        ", cvar_dual(u, np.full(u.size, 1 / u.size), alpha)[0])

# %% [markdown]
# The worst-case weights from the dual put mass ``1/(alpha N)`` on the three
# largest losses and nothing elsewhere.

# %%
_, q = cvar_dual(u, np.full(u.size, 1 / u.size), alpha)
print(np.round(q, 4))

# %% [markdown]
# ## Splitting across subpopulations
#
# Averaging the top k of the pooled losses equals the best way to spread k
# picks across groups, taking the hardest within each group.

# %%
groups = SubpopIndex(Rng(1).integers(3, u.size), 3)
for k in (1, 3, 6):
    value, nu = agnostic_topk_decomposition(u, groups, k)
    print(f"k={k}: decomposed {value:.6f}  pooled {avg_top(u, k):.6f}  group weights {nu}")

# %% [markdown]
# ## Bias of the empirical estimate
#
# For uniform losses the bias is exactly ``(1 - alpha) / (2 (N + 1))``, so it
# decays like ``1/N``. Bernoulli losses with ``P(1) = alpha`` sit on the
# kink of the CVaR and decay like ``1/sqrt(N)``.

# %%
for sampler in (uniform_sampler(), bernoulli_sampler(alpha)):
    study = cvar_bias_study(sampler, alpha, [64, 256, 1024], replications=4000, seed=0)
    print(sampler.name, "bias", np.round(study.bias_mean, 5), "exponent", round(study.decay_exponent, 3))
