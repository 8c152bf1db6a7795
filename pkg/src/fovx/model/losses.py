"""Adversarial and L1 objectives for the slice generators.

``gan_loss`` is the two-player value on sigmoid scores,
``mean log D(real) + mean log(1 - D(fake))``, which the discriminator
maximizes.  The generator minimizes ``adversarial + lambda * L1`` where the
adversarial term is ``-mean log D(fake)`` (non-saturating, default) or
``mean log(1 - D(fake))`` (saturating).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import ValidationError

EPS = 1e-7


def gan_loss(d_real_scores, d_fake_scores, eps: float = EPS):
    """Value of the minimax game on probabilities in (0, 1), clamped by ``eps``."""
    real = torch.as_tensor(d_real_scores).clamp(eps, 1 - eps)
    fake = torch.as_tensor(d_fake_scores).clamp(eps, 1 - eps)
    return torch.log(real).mean() + torch.log1p(-fake).mean()


def l1_loss(target, predicted):
    target, predicted = torch.as_tensor(target), torch.as_tensor(predicted)
    if target.shape != predicted.shape:
        raise ValidationError(f"L1 shapes differ: {tuple(target.shape)} vs {tuple(predicted.shape)}")
    return (target - predicted).abs().mean()


def generator_adversarial_loss(d_fake_logits, saturating: bool = False):
    """Generator's adversarial term from raw discriminator logits."""
    if saturating:
        # log(1 - sigmoid(x)) = logsigmoid(-x)
        return F.logsigmoid(-d_fake_logits).mean()
    return -F.logsigmoid(d_fake_logits).mean()


def discriminator_loss(d_real_logits, d_fake_logits):
    """Negated ``gan_loss`` on logits, halved as in pix2pix; minimizing it maximizes the game value."""
    return -0.5 * (F.logsigmoid(d_real_logits).mean() + F.logsigmoid(-d_fake_logits).mean())


def combined_generator_objective(gan_term, l1_term, lam: float):
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    return gan_term + lam * l1_term
