"""Sample weights, the one-step-ahead meta-gradient and the weight optimizer."""

from .lemmas import (Lemma42Report, Lemma43Report, l2_gm_gradient, relative_inner_lr,
                     verify_lemma_42, verify_lemma_43)
from .meta import (GroupIndex, MetaConfig, algorithm1_optimize, gm_loss, group_schedule,
                   meta_gradient, meta_gradient_from, one_step_ahead, step_from_gradients)
from .objectives import DistillObjective, tiny_instance
from .weights import S_INIT, SampleWeights, softmax_pullback, softmax_weights

__all__ = [
    "DistillObjective", "GroupIndex", "Lemma42Report", "Lemma43Report", "MetaConfig", "S_INIT",
    "SampleWeights", "algorithm1_optimize", "gm_loss", "group_schedule", "l2_gm_gradient",
    "meta_gradient", "meta_gradient_from", "one_step_ahead", "relative_inner_lr", "softmax_pullback",
    "softmax_weights", "step_from_gradients", "tiny_instance", "verify_lemma_42",
    "verify_lemma_43",
]
