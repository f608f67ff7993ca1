"""Pixel, least-squares adversarial and combined generator objectives.

All terms are means over every element of the batch, which absorbs the 1/N
of the batch-summed objective.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

DEFAULT_LAMBDA = 50.0


@dataclass
class LossReport:
    l_p: float = 0.0
    l_g: float = 0.0
    l_g_tilde: float = 0.0
    adv_g: float = 0.0
    adv_dg: float = 0.0
    adv_dh: float = 0.0
    total_g: float = 0.0

    def as_dict(self):
        return asdict(self)

    def is_finite(self):
        return all(math.isfinite(v) for v in self.as_dict().values())


def _l1(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def loss_pixel_consistency(y_regen, y):
    """Mean absolute deviation of the re-degraded estimate from the observation."""
    return _l1(y_regen, y)


def loss_pixel_ground_truth(x_hat, x):
    """Mean absolute error of the restored image against the clean image."""
    return _l1(x_hat, x)


def loss_regenerated_ground_truth(x_hat2, x):
    """Mean absolute error of G applied to the re-degraded estimate."""
    return _l1(x_hat2, x)


def lsgan_d_loss(real_scores, fake_scores):
    """Least-squares critic loss with targets 1 (real) and 0 (fake).

    The fake scores are expected to come from detached generator output.
    """
    return 0.5 * ((real_scores - 1) ** 2).mean() + 0.5 * (fake_scores**2).mean()


def lsgan_g_loss(fake_scores):
    return 0.5 * ((fake_scores - 1) ** 2).mean()


def total_generator_objective(adv_dg, adv_dh, l_p, l_g, l_g_tilde, lam=DEFAULT_LAMBDA):
    """Adversarial terms of both critics plus lambda times the three L1 terms.

    Terms disabled by an ablation are passed as 0.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return adv_dg + adv_dh + lam * (l_p + l_g + l_g_tilde)


def as_float(v):
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
