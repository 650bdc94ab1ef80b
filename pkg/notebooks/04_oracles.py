# %% [markdown]
# # Oracles
#
# Independent recomputations that back the library: a closed-form minimiser
# checked against a generic solver, and gradients checked against finite
# differences. The same suites run from the command line with
# ``s2m oracle {cvar,owa,consistency,gradients}``.

# %%
from s2m.oracles import (
    ConsistencyProblem,
    consistency_objective,
    numerical_simplex_minimizer,
    topk_softmax_minimizer,
    verify_consistency,
    verify_gradients,
)

# %% [markdown]
# Minimising ``sum_y p_y [-log(tau g_y)]_+`` over the simplex caps the most
# likely labels at ``1/tau`` and shares the rest in proportion to ``p``.

# %%
prob = ConsistencyProblem([0.6, 0.3, 0.1], tau=2.0)
sol = topk_softmax_minimizer(prob)
print("closed form", sol.g, "objective", sol.objective)
g = numerical_simplex_minimizer(prob)
print("numerical  ", g, "objective", consistency_objective(prob, g))

# %%
print(verify_consistency(fuzz_cases=20, random_points=2000).to_text())
print(verify_gradients(trials=10).to_text())
