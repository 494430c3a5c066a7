"""Training losses: region-weighted L1 reconstruction, perceptual distance
through a pluggable feature extractor, the adversarial pair with a
spectrally normalized patch discriminator, and the closed-form KL term for
the conditional noise distributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import SNConv2d, init_conv
from .exceptions import InvalidInputError


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the combined objective (defaults as trained)."""

    gamma: float = 10.0
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.01
    lambda4: float = 0.01
    scale_weights: tuple[float, ...] | None = None

    def kl_scale_weights(self, n_terms: int) -> tuple[float, ...]:
        if self.scale_weights is not None:
            if len(self.scale_weights) != n_terms:
                raise InvalidInputError(
                    f"{len(self.scale_weights)} scale weights for {n_terms} terms"
                )
            return self.scale_weights
        return (1.0 / n_terms,) * n_terms if n_terms else ()


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x if x.dim() == 4 else x[None]


def reconstruction_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    mask: torch.Tensor,
    gamma: float = 10.0,
) -> torch.Tensor:
    """Known-region mean L1 plus gamma times hole-region mean L1.

    Region means are per pixel and channel, so gamma's meaning does not
    depend on the hole size. An empty region contributes zero.
    """
    pred, gt = _batched(pred), _batched(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if mask.dim() == 2:
        mask = mask[None, None]
    elif mask.dim() == 3:
        mask = mask[:, None]
    if mask.shape[-2:] != pred.shape[-2:]:
        raise InvalidInputError(
            f"mask {tuple(mask.shape)} does not match images {tuple(pred.shape)}"
        )
    diff = (pred - gt).abs()
    channels = pred.shape[1]

    def region_mean(region: torch.Tensor) -> torch.Tensor:
        count = region.sum() * channels
        if count.item() == 0:
            return diff.new_zeros(())
        return (diff * region).sum() / count

    return region_mean(mask) + gamma * region_mean(1.0 - mask)


class ConvFeatureExtractor(nn.Module):
    """Default perceptual feature extractor: a frozen three-layer conv stack
    with fixed-seed random weights. Deterministic and self-contained; weights
    of an externally trained extractor can be loaded via ``load_state_dict``
    (tensor names ``convs.{0,1,2}.weight`` / ``.bias``).
    """

    def __init__(self, in_channels: int = 3, seed: int = 17):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = [in_channels, 16, 32, 64]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            for i in range(3)
        )
        for conv in self.convs:
            init_conv(conv, gen)
        for p in self.parameters():
            p.requires_grad_(False)

    def extract(self, img: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        x = _batched(img)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats

    forward = extract


def perceptual_loss(pred: torch.Tensor, gt: torch.Tensor, extractor) -> torch.Tensor:
    """Sum over extractor layers of the feature-dimension-normalized L1 gap."""
    total = None
    for fp, fg in zip(extractor.extract(pred), extractor.extract(gt)):
        term = (fp - fg).abs().mean()
        total = term if total is None else total + term
    if total is None:
        raise InvalidInputError("feature extractor produced no layers")
    return total


def adversarial_generator_loss(disc: nn.Module, pred: torch.Tensor) -> torch.Tensor:
    """Generator side: maximize the critic score, i.e. minimize -E[D(pred)]."""
    return (-disc(_batched(pred))).mean()


def discriminator_loss(
    disc: nn.Module, pred: torch.Tensor, gt: torch.Tensor
) -> torch.Tensor:
    """Critic objective E[1 - D(real)] + E[D(fake)]; ``pred`` must already be
    detached from the generator graph."""
    return (1.0 - disc(_batched(gt))).mean() + disc(_batched(pred)).mean()


def kl_loss(
    dists: list[tuple[torch.Tensor, torch.Tensor]],
    weights: tuple[float, ...] | list[float] | None = None,
) -> torch.Tensor:
    """Weighted sum over scales of KL(N(mu, sigma^2) || N(0, 1)) in closed
    form: 0.5 * (mu^2 + sigma^2 - 1 - 2 ln sigma), batch-averaged."""
    if weights is None:
        weights = (1.0 / len(dists),) * len(dists) if dists else ()
    if len(weights) != len(dists):
        raise InvalidInputError(f"{len(weights)} weights for {len(dists)} scales")
    total = torch.zeros(())
    for (mu, sigma), w in zip(dists, weights):
        if not torch.is_tensor(mu):
            mu = torch.tensor(float(mu), dtype=torch.float64)
        if not torch.is_tensor(sigma):
            sigma = torch.tensor(float(sigma), dtype=torch.float64)
        if (sigma <= 0).any():
            raise InvalidInputError("sigma must be positive")
        term = 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch.log(sigma))
        total = total + w * term.mean()
    return total


def total_loss(rec, perc, adv, kl, weights: LossWeights = LossWeights()):
    """Weighted combination of the four training terms."""
    return (weights.lambda1 * rec + weights.lambda2 * perc
            + weights.lambda3 * adv + weights.lambda4 * kl)


class PatchDiscriminator(nn.Module):
    """Four spectrally normalized stride-2 convolutions with LeakyReLU(0.2)
    and a spectrally normalized scalar patch head. Unconditioned on the mask.
    """

    def __init__(self, in_channels: int = 3, base_channels: int = 64,
                 generator: torch.Generator | None = None):
        super().__init__()
        widths = [in_channels, base_channels, base_channels * 2,
                  base_channels * 4, base_channels * 4]
        self.convs = nn.ModuleList(
            SNConv2d(widths[i], widths[i + 1], 4, stride=2, padding=1,
                     generator=generator)
            for i in range(4)
        )
        self.head = SNConv2d(widths[-1], 1, 3, stride=1, padding=1,
                             generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x)

    def sn_layers(self) -> list[SNConv2d]:
        return [*self.convs, self.head]
