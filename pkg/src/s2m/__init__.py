"""Doubly-stochastic mining: top-k' minibatch SGD over top-k sampled negatives, with CVaR tools."""

from .core_math import DomainError, Rng, avg_top, derive_seed, owa, select_top
from .cvar import (
    BoundInputs,
    SubpopIndex,
    agnostic_topk_decomposition,
    cvar_closed_form,
    cvar_dual,
    cvar_variational,
    rademacher_bound_m2,
)
from .datagen import Dataset, generate_mixture, make_mixture_spec, read_dataset, write_dataset
from .eval import recall_at_r
from .losses import LossSpec, MarginLoss, bowl_loss, snm_loss, softmax_ce_loss
from .mining import MiningConfig, expected_loss_oracle, train
from .model import Scorer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
