"""Generative models, the MLP engine and the reference classifier."""

from .classifier import Classifier, ClassifierConfig, train_classifier
from .gan import GanConfig, GanTrainer, gradient_penalty, train_gan
from .generators import Generator, Gmm, bootstrap_fit, gan_sample, gmm_fit
from .mlp import (AdamState, Mlp, adam_step, init_mlp, load_mlp, mlp_forward, mlp_grad,
                  save_mlp, spectral_normalize)

__all__ = [
    "AdamState", "Classifier", "ClassifierConfig", "GanConfig", "GanTrainer", "Generator",
    "Gmm", "Mlp", "adam_step", "bootstrap_fit", "gan_sample", "gmm_fit", "gradient_penalty",
    "init_mlp", "load_mlp", "mlp_forward", "mlp_grad", "save_mlp", "spectral_normalize",
    "train_classifier", "train_gan",
]
