# %% [markdown]
# # Doubly-stochastic mining
#
# One update keeps the k' hardest examples of a minibatch, and each example's
# loss averages its k hardest labels among a sampled pool. Plain SGD, negative
# mining and top-k' SGD are settings of the same loop.

# %%
import numpy as np

from s2m.core_math import derive_seed
from s2m.datagen import generate_mixture, make_mixture_spec
from s2m.losses import LossSpec
from s2m.mining import MiningConfig, expected_loss_oracle, train
from s2m.model import Scorer

# %% [markdown]
# ## The expected minibatch loss only depends on ranks
#
# Averaged over every minibatch of size 2 drawn from losses (3, 2, 1), the
# top-1 loss is 8/3, and the weights on the sorted losses are (2/3, 1/3, 0).

# %%
ex = expected_loss_oracle([3.0, 2.0, 1.0], 2, 1)
print(ex.value, ex.theta.weights)
print(expected_loss_oracle([30.0, 2.5, -4.0], 2, 1).theta.weights)

# %% [markdown]
# ## Four methods, one loop

# %%
spec_mix = make_mixture_spec([list(range(10)), list(range(10, 20))], dim=8, seed=3)
data = generate_mixture(spec_mix, 2000, seed=4)
loss = LossSpec("bowl", label_top_k=3)
settings = {
    "sgd": MiningConfig(32, 32, None, steps=200, seed=derive_seed(0, "demo")),
    "snm": MiningConfig(32, 32, 6, steps=200, seed=derive_seed(0, "demo")),
    "qsgd": MiningConfig(32, 8, None, steps=200, seed=derive_seed(0, "demo")),
    "s2m": MiningConfig(32, 8, 6, steps=200, seed=derive_seed(0, "demo")),
}
for method, cfg in settings.items():
    res = train(data, cfg, loss, Scorer.linear(8, 20, seed=1), method=method)
    print(f"{method:>4}: mean loss first 20 steps {res.losses[:20].mean():.3f}, last 20 {res.losses[-20:].mean():.3f}")

# %% [markdown]
# Running ``s2m`` with the sgd setting reproduces sgd exactly.

# %%
a = train(data, settings["sgd"], loss, Scorer.linear(8, 20, seed=1), method="sgd")
b = train(data, settings["sgd"], loss, Scorer.linear(8, 20, seed=1), method="s2m")
print("identical traces:", np.array_equal(a.losses, b.losses))
