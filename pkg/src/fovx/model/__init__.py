"""Generators, objectives, training and inference."""

from .bundle import ModelBundle, load_bundle, save_bundle
from .impute import impute_normalized, impute_study, predict_plane, predict_volume
from .losses import (combined_generator_objective, discriminator_loss, gan_loss,
                     generator_adversarial_loss, l1_loss)
from .networks import (DiscriminatorConfig, GeneratorConfig, PatchDiscriminator,
                       ResnetGenerator, TinyGenerator)
from .train import TrainConfig, TrainingSample, prepare_sample, train

__all__ = [
    "ModelBundle", "load_bundle", "save_bundle", "impute_normalized", "impute_study",
    "predict_plane", "predict_volume", "combined_generator_objective", "discriminator_loss",
    "gan_loss", "generator_adversarial_loss", "l1_loss", "DiscriminatorConfig",
    "GeneratorConfig", "PatchDiscriminator", "ResnetGenerator", "TinyGenerator",
    "TrainConfig", "TrainingSample", "prepare_sample", "train",
]
