# %% [markdown]
# # Head and tail classes under top-k' minibatches
#
# Ten Gaussian classes; classes 5-9 keep one training example in a hundred.
# Keeping only the hardest k' of each minibatch of 64 shifts effort toward
# the rare classes. Accuracy is top-1 recall on a balanced test set.

# %%
import numpy as np

from s2m.core_math import derive_seed
from s2m.datagen import downsample_tail, generate_mixture, make_mixture_spec
from s2m.eval import head_tail_tiers, recall_at_r
from s2m.losses import LossSpec
from s2m.mining import MiningConfig, train
from s2m.model import Scorer


def run(seed, kp):
    spec = make_mixture_spec([list(range(5)), list(range(5, 10))], 20, seed=derive_seed(seed, "mixture"))
    tr = downsample_tail(generate_mixture(spec, 5000, seed=derive_seed(seed, "train")), range(5), 100.0,
                         derive_seed(seed, "downsample"))
    te = generate_mixture(spec, 2000, seed=derive_seed(seed, "test"))
    cfg = MiningConfig(64, kp, None, steps=1000, learning_rate=0.1, seed=derive_seed(seed, "mining"))
    out = train(tr, cfg, LossSpec("softmax_ce", None), Scorer.linear(20, 10, seed=derive_seed(seed, "init")))
    m = recall_at_r(out.scorer, te, [1, 2], head_tail_tiers(te, range(5)), ("head", "tail"))
    return [m.recall[t][1] for t in ("full", "head", "tail")]


# %%
print("k'   full   head   tail")
for kp in (1, 16, 32, 64):
    full, head, tail = np.mean([run(s, kp) for s in range(5)], axis=0)
    print(f"{kp:>2}  {full:.3f}  {head:.3f}  {tail:.3f}")
