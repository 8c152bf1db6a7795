"""Finite-difference check of the generator objective on a two-layer network."""

import torch
import torch.nn as nn

from fovx.model import (TinyGenerator, combined_generator_objective, generator_adversarial_loss,
                        l1_loss)


class _TinyDisc(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 1, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


def gradcheck_setup(lam):
    torch.manual_seed(0)
    g = TinyGenerator(6, hidden=3).double()
    d = _TinyDisc().double()
    x = torch.rand(2, 6, 8, 8, dtype=torch.float64)
    y = torch.rand(2, 1, 8, 8, dtype=torch.float64)

    def objective(adv_only=False, l1_only=False):
        fake = g(x)
        adv = generator_adversarial_loss(d(fake))
        l1 = l1_loss(y, fake)
        if adv_only:
            return adv
        if l1_only:
            return l1
        return combined_generator_objective(adv, l1, lam)
    return g, objective


def analytic(g, f):
    g.zero_grad()
    f().backward()
    return [p.grad.detach().clone() for p in g.parameters()]


def numeric(g, f, h=1e-6):
    grads = []
    with torch.no_grad():
        for p in g.parameters():
            out = torch.zeros_like(p)
            flat, gflat = p.view(-1), out.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = f().item()
                flat[i] = old - h
                down = f().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(out)
    return grads


def max_relative_error(a, b, floor=1e-8):
    return max(float(((x - y).abs() / torch.clamp(torch.maximum(x.abs(), y.abs()), min=floor)).max())
               for x, y in zip(a, b))
