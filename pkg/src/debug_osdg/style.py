"""Global probabilistic style augmentation (GPSA).

Per-instance channel statistics of an intermediate feature map are resampled
from Gaussians whose variances are moving averages of the batch-level spread of
those statistics, and the map is re-stylized AdaIN-style.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .core import ShapeError, check_feature_map

EPS = 1e-6


@dataclass
class StyleStats:
    mu: torch.Tensor  # B x C
    var: torch.Tensor  # B x C
    sigma: torch.Tensor  # B x C, sqrt(var + eps)


@dataclass
class BatchStatVariance:
    var_mu: torch.Tensor  # C
    var_sigma: torch.Tensor  # C


@dataclass
class StylePerturbation:
    beta: torch.Tensor
    gamma: torch.Tensor
    xi_mu: torch.Tensor
    xi_sigma: torch.Tensor


@dataclass
class GlobalUncertainty:
    u_mu: torch.Tensor
    u_sigma: torch.Tensor
    alpha: float = 0.8
    update_count: int = 0

    @classmethod
    def zeros(cls, channels: int, alpha: float = 0.8, dtype: torch.dtype = torch.float32) -> "GlobalUncertainty":
        return cls(torch.zeros(channels, dtype=dtype), torch.zeros(channels, dtype=dtype), alpha, 0)

    @property
    def channels(self) -> int:
        return self.u_mu.numel()

    def state_dict(self) -> dict:
        return {
            "u_mu": self.u_mu.clone(),
            "u_sigma": self.u_sigma.clone(),
            "alpha": self.alpha,
            "update_count": self.update_count,
        }

    def load_state_dict(self, state: dict) -> None:
        if state["u_mu"].numel() != self.channels:
            raise ShapeError(f"uncertainty state has {state['u_mu'].numel()} channels, expected {self.channels}")
        self.u_mu = state["u_mu"].clone()
        self.u_sigma = state["u_sigma"].clone()
        self.alpha = float(state["alpha"])
        self.update_count = int(state["update_count"])


def instance_stats(z: torch.Tensor, eps: float = EPS) -> StyleStats:
    check_feature_map(z)
    mu = z.mean(dim=(2, 3))
    var = z.var(dim=(2, 3), unbiased=False)
    return StyleStats(mu, var, (var + eps).sqrt())


def batch_stat_variance(stats: StyleStats) -> BatchStatVariance:
    mu = stats.mu.detach()
    sigma = stats.sigma.detach()
    return BatchStatVariance(mu.var(dim=0, unbiased=False), sigma.var(dim=0, unbiased=False))


def update_global(gu: GlobalUncertainty, bsv: BatchStatVariance) -> GlobalUncertainty:
    """Moving-average update, in place. Returns `gu` for chaining."""
    if bsv.var_mu.numel() != gu.channels or bsv.var_sigma.numel() != gu.channels:
        raise ShapeError(f"batch statistics have {bsv.var_mu.numel()} channels, uncertainty has {gu.channels}")
    a = gu.alpha
    gu.u_mu = a * gu.u_mu + (1 - a) * bsv.var_mu.to(gu.u_mu)
    gu.u_sigma = a * gu.u_sigma + (1 - a) * bsv.var_sigma.to(gu.u_sigma)
    gu.update_count += 1
    return gu


def sample_perturbation(
    stats: StyleStats,
    gu: GlobalUncertainty,
    generator: Optional[torch.Generator] = None,
    xi_mu: Optional[torch.Tensor] = None,
    xi_sigma: Optional[torch.Tensor] = None,
) -> StylePerturbation:
    """Draw new per-instance (mean, std) with the reparameterization trick.

    `xi_mu` / `xi_sigma` may be supplied to pin the noise.
    """
    shape, dtype = stats.mu.shape, stats.mu.dtype
    if xi_mu is None:
        xi_mu = torch.randn(shape, generator=generator, dtype=dtype)
    if xi_sigma is None:
        xi_sigma = torch.randn(shape, generator=generator, dtype=dtype)
    sd_mu = gu.u_mu.to(dtype).clamp_min(0).sqrt()
    sd_sigma = gu.u_sigma.to(dtype).clamp_min(0).sqrt()
    beta = stats.mu + xi_mu * sd_mu
    gamma = stats.sigma + xi_sigma * sd_sigma
    return StylePerturbation(beta, gamma, xi_mu, xi_sigma)


def restyle(z: torch.Tensor, stats: StyleStats, pert: StylePerturbation) -> torch.Tensor:
    mu = stats.mu[:, :, None, None]
    sigma = stats.sigma[:, :, None, None]
    return pert.gamma[:, :, None, None] * (z - mu) / sigma + pert.beta[:, :, None, None]


def gpsa_layer(
    z: torch.Tensor,
    gu: GlobalUncertainty,
    train: bool,
    prob: float,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Apply GPSA to one feature map.

    In train mode the global uncertainty is updated on every call. The
    perturbation fires with probability `prob` and is drawn from the
    uncertainty as it stood before this batch's update.
    """
    if not train:
        return z
    stats = instance_stats(z)
    fire = torch.rand((), generator=generator).item() < prob
    pert = sample_perturbation(stats, gu, generator) if fire else None
    update_global(gu, batch_stat_variance(stats))
    if pert is None:
        return z
    return restyle(z, stats, pert)


class GPSA(nn.Module):
    """Parameter-free GPSA layer owning one GlobalUncertainty."""

    def __init__(self, channels: int, alpha: float = 0.8, prob: float = 0.5) -> None:
        super().__init__()
        self.prob = prob
        self.uncertainty = GlobalUncertainty.zeros(channels, alpha)

    def forward(self, z: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return gpsa_layer(z, self.uncertainty, self.training, self.prob, generator)

    def extra_repr(self) -> str:
        return f"channels={self.uncertainty.channels}, alpha={self.uncertainty.alpha}, prob={self.prob}"
