"""The inpainting network: encoder, frozen generative memory, progressive
decoder with per-scale memory queries, latent-embedding updates, and
conditional stochastic variation.

Variant ladder (ablation order):

- ``base``    encoder + decoder only;
- ``gm-bm``   adds memory queries driven by a fixed initial embedding, with
  standard-normal noise;
- ``gm-csv``  adds conditional noise sampled from per-scale predicted
  normal distributions;
- ``gm-srm``  adds additive embedding updates after every decoder block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import imaging
from .blocks import (
    DecoderBlock,
    EncoderBlock,
    bilinear_upsample,
    init_conv,
    init_linear,
    modulated_conv2d,
)
from .exceptions import ConfigurationError, InvalidInputError

VARIANTS = ("base", "gm-bm", "gm-csv", "gm-srm")

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Shape/architecture knobs. Defaults are the desk-scale configuration."""

    image_side: int = 64
    n_scales: int = 4
    base_channels: int = 32
    d_c: int = 512
    in_channels: int = 3
    variant: str = "gm-srm"
    attention_reduction: int = 4

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.n_scales < 2:
            raise ConfigurationError("n_scales must be >= 2")
        if self.image_side % (2 ** self.n_scales) != 0:
            raise ConfigurationError(
                f"image_side {self.image_side} not divisible by 2^{self.n_scales}"
            )
        if min(self.base_channels, self.d_c, self.in_channels) < 1:
            raise ConfigurationError("channel widths must be positive")

    @property
    def has_memory(self) -> bool:
        return self.variant != "base"

    @property
    def has_conditional_noise(self) -> bool:
        return self.variant in ("gm-csv", "gm-srm")

    @property
    def has_embedding_updates(self) -> bool:
        return self.variant == "gm-srm"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def encoder_channels(cfg: ModelConfig) -> list[int]:
    """Channel widths of the encoder features F^1 .. F^n (F^1 is the raw
    image+mask concat; widths double per level, capped at 8x base)."""
    chans = [cfg.in_channels + 1]
    for i in range(1, cfg.n_scales):
        chans.append(min(cfg.base_channels * 2 ** (i - 1), 8 * cfg.base_channels))
    return chans


def decoder_channels(cfg: ModelConfig) -> list[int]:
    """Output widths of decoder blocks j = 1 .. n-1 (mirrors the encoder level
    at the same resolution; the full-resolution output uses base width)."""
    enc = encoder_channels(cfg)
    out = []
    for j in range(1, cfg.n_scales):
        level = cfg.n_scales - j
        out.append(enc[level - 1] if level >= 2 else cfg.base_channels)
    return out


def memory_channels(cfg: ModelConfig) -> list[int]:
    """Widths of the per-scale memory feature maps (same schedule as the decoder)."""
    return decoder_channels(cfg)


class LatentMapper(nn.Module):
    """Non-linear map from a feature map to a fixed-length latent vector:
    conv, LeakyReLU, global average pool, fully connected layer."""

    def __init__(self, in_channels: int, d_c: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.fc = nn.Linear(in_channels, d_c)
        init_conv(self.conv, generator)
        init_linear(self.fc, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.leaky_relu(self.conv(x), 0.2)
        return self.fc(y.mean(dim=(-2, -1)))


class CondNoiseHead(nn.Module):
    """Per-scale noise-distribution head.

    The joint path predicts (mu, sigma) from the concatenation of encoder and
    decoder features at the same resolution; the encoder-only path serves as
    the fallback when no decoder features exist. Raw per-pixel 2-channel maps
    are reduced to scalars by spatial mean; sigma is softplus-floored.
    """

    def __init__(self, enc_channels: int, dec_channels: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.enc_conv = nn.Conv2d(enc_channels, 2, 3, padding=1)
        self.joint_conv = nn.Conv2d(enc_channels + dec_channels, 2, 3, padding=1)
        init_conv(self.enc_conv, generator)
        init_conv(self.joint_conv, generator)

    def encoder_raw(self, f_enc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw (mu, sigma) scalars from the encoder-only head, pre-softplus."""
        raw = self.enc_conv(f_enc).mean(dim=(-2, -1))
        return raw[:, 0], raw[:, 1]

    def forward(
        self, f_enc: torch.Tensor, f_dec: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if f_dec is None:
            raw = self.enc_conv(f_enc)
        else:
            if f_enc.shape[-2:] != f_dec.shape[-2:]:
                raise InvalidInputError(
                    f"conditioning features not co-shaped: "
                    f"{tuple(f_enc.shape)} vs {tuple(f_dec.shape)}"
                )
            raw = self.joint_conv(torch.cat([f_enc, f_dec], dim=1))
        m = raw.mean(dim=(-2, -1))
        mu = m[:, 0]
        sigma = F.softplus(m[:, 1]) + SIGMA_FLOOR
        return mu, sigma


def sample_noise(
    mu: torch.Tensor,
    sigma: torch.Tensor,
    spatial: tuple[int, int],
    generator: torch.Generator | None,
) -> torch.Tensor:
    """Reparameterized per-pixel draw from N(mu, sigma^2): mu + sigma * eps."""
    b = mu.shape[0]
    eps = torch.randn(b, 1, *spatial, generator=generator, dtype=mu.dtype)
    return mu.view(-1, 1, 1, 1) + sigma.view(-1, 1, 1, 1) * eps


class MemoryBlock(nn.Module):
    """One synthesis scale of the generative memory: upsample the previous
    memory features, concat the (externally provided) encoder-feature slot,
    apply a style-modulated demodulated conv, add scaled noise, activate.
    """

    def __init__(self, prev_channels: int, slot_channels: int, out_channels: int,
                 d_c: int, generator: torch.Generator | None = None):
        super().__init__()
        self.prev_channels = prev_channels
        self.slot_channels = slot_channels
        in_channels = prev_channels + slot_channels
        weight = torch.randn(out_channels, in_channels, 3, 3, generator=generator)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.affine = nn.Linear(d_c, in_channels)
        init_linear(self.affine, generator)
        with torch.no_grad():
            self.affine.bias.fill_(1.0)  # unit style at init
        self.noise_scale = nn.Parameter(torch.zeros(1))

    def forward(self, prev: torch.Tensor, slot: torch.Tensor,
                latent: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        x = torch.cat([bilinear_upsample(prev, 2), slot], dim=1)
        style = self.affine(latent)
        y = modulated_conv2d(x, style, self.weight, demodulate=True)
        y = y + self.noise_scale * noise + self.bias[None, :, None, None]
        return F.leaky_relu(y, 0.2)


class GenerativeMemory(nn.Module):
    """StyleGAN-flavored synthesis stack pre-trained as a standalone generator
    and later frozen inside the inpainting model.

    The mapping MLP and the RGB head exist for adversarial pre-training only;
    during inpainting the latent embedding is injected directly in style
    space and the per-scale feature maps are consumed by the decoder.
    """

    def __init__(self, cfg: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        enc = encoder_channels(cfg)
        mem = memory_channels(cfg)
        self.cfg_echo = cfg.to_dict()
        self.const_side = cfg.image_side >> (cfg.n_scales - 1)
        self.const = nn.Parameter(
            torch.randn(1, enc[-1], self.const_side, self.const_side,
                        generator=generator)
        )
        blocks = []
        for j in range(1, cfg.n_scales):
            prev_ch = enc[-1] if j == 1 else mem[j - 2]
            blocks.append(MemoryBlock(prev_ch, mem[j - 1], mem[j - 1], cfg.d_c,
                                      generator))
        self.blocks = nn.ModuleList(blocks)
        self.mapping = nn.Sequential(
            nn.Linear(cfg.d_c, cfg.d_c), nn.LeakyReLU(0.2),
            nn.Linear(cfg.d_c, cfg.d_c),
        )
        for m in self.mapping:
            if isinstance(m, nn.Linear):
                init_linear(m, generator)
        self.to_rgb = nn.Conv2d(mem[-1], cfg.in_channels, 3, padding=1)
        init_conv(self.to_rgb, generator)

    def generate(self, z: torch.Tensor,
                 generator: torch.Generator | None = None) -> torch.Tensor:
        """Pre-training path: latent -> mapping -> synthesis -> tanh image.

        The encoder-feature slots are fed zeros; noise is standard normal.
        """
        w = self.mapping(z)
        b = z.shape[0]
        x = self.const.expand(b, -1, -1, -1)
        for block in self.blocks:
            side = x.shape[-1] * 2
            slot = torch.zeros(b, block.slot_channels, side, side, dtype=z.dtype)
            noise = torch.randn(b, 1, side, side, generator=generator, dtype=z.dtype)
            x = block(x, slot, w, noise)
        return torch.tanh(self.to_rgb(x))


class GMSRM(nn.Module):
    """Full inpainting network over a square input of ``cfg.image_side``.

    ``forward`` consumes an already-masked image batch plus the mask and
    returns the raw synthesized batch together with the per-scale noise
    distribution parameters needed by the KL loss.
    """

    def __init__(self, cfg: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_scales
        enc = encoder_channels(cfg)
        dec = decoder_channels(cfg)
        mem = memory_channels(cfg)

        self.enc_blocks = nn.ModuleList(
            EncoderBlock(enc[i], enc[i + 1], cfg.attention_reduction, generator)
            for i in range(n - 1)
        )

        dec_blocks = []
        for j in range(1, n):
            in_ch = enc[-1] if j == 1 else dec[j - 2]
            if j >= 2:
                in_ch += enc[n - j]  # same-resolution encoder skip
                if cfg.has_memory:
                    in_ch += mem[j - 2]
            dec_blocks.append(
                DecoderBlock(in_ch, dec[j - 1], cfg.attention_reduction, generator)
            )
        self.dec_blocks = nn.ModuleList(dec_blocks)

        out_in = dec[-1] + (mem[-1] if cfg.has_memory else 0)
        self.out_conv = nn.Conv2d(out_in, cfg.in_channels, 3, padding=1)
        init_conv(self.out_conv, generator)

        if cfg.has_memory:
            self.memory = GenerativeMemory(cfg, generator)
            self.embed_init = LatentMapper(enc[-1], cfg.d_c, generator)
            self.slot_convs = nn.ModuleList(
                nn.Conv2d(enc[n - j - 1], mem[j - 1], 3, padding=1)
                for j in range(1, n)
            )
            for conv in self.slot_convs:
                init_conv(conv, generator)
        else:
            self.memory = None
            self.embed_init = None
            self.slot_convs = None

        if cfg.has_conditional_noise:
            # one head per encoder level i = 1 .. n-1, consumed at decoder
            # step j = n - i
            self.noise_heads = nn.ModuleList(
                CondNoiseHead(enc[i - 1], dec[n - i - 1], generator)
                for i in range(1, n)
            )
        else:
            self.noise_heads = None

        if cfg.has_embedding_updates:
            self.embed_updates = nn.ModuleList(
                LatentMapper(dec[j - 1], cfg.d_c, generator) for j in range(1, n)
            )
        else:
            self.embed_updates = None

        self.memory_pretrained = False

    # ------------------------------------------------------------------ #

    def _check_input(self, img: torch.Tensor, mask: torch.Tensor) -> None:
        side = self.cfg.image_side
        if img.dim() != 4 or mask.dim() != 4:
            raise InvalidInputError("expected batched (B, C, H, W) tensors")
        if img.shape[1] != self.cfg.in_channels:
            raise InvalidInputError(
                f"expected {self.cfg.in_channels} image channels, got {img.shape[1]}"
            )
        if img.shape[-2:] != (side, side) or mask.shape[-2:] != (side, side):
            raise InvalidInputError(
                f"model is configured for {side}x{side} inputs, got "
                f"{tuple(img.shape[-2:])} / {tuple(mask.shape[-2:])}"
            )

    def encode(
        self, img_masked: torch.Tensor, mask: torch.Tensor
    ) -> tuple[list[torch.Tensor], list[tuple[torch.Tensor, torch.Tensor]]]:
        """Run the encoder; returns the feature pyramid (finest to coarsest)
        and the raw encoder-side (mu, sigma) head outputs, one pair per level
        (empty for variants without conditional noise)."""
        self._check_input(img_masked, mask)
        feats = self._encoder_features(img_masked, mask)
        raw_heads = []
        if self.noise_heads is not None:
            for i in range(1, self.cfg.n_scales):
                raw_heads.append(self.noise_heads[i - 1].encoder_raw(feats[i - 1]))
        return feats[1:], raw_heads

    def _encoder_features(
        self, img_masked: torch.Tensor, mask: torch.Tensor
    ) -> list[torch.Tensor]:
        feats = [torch.cat([img_masked, mask], dim=1)]
        for block in self.enc_blocks:
            feats.append(block(feats[-1]))
        return feats

    def forward(
        self,
        img_masked: torch.Tensor,
        mask: torch.Tensor,
        generator: torch.Generator | None = None,
        instrumentation: dict | None = None,
    ) -> tuple[torch.Tensor, dict]:
        """Synthesize a batch. Returns ``(output, aux)`` where aux carries the
        per-scale noise distribution parameters ("mu", "sigma") used by the
        KL term (empty lists for variants without conditional noise)."""
        self._check_input(img_masked, mask)
        cfg = self.cfg
        n = cfg.n_scales
        feats = self._encoder_features(img_masked, mask)

        c = self.embed_init(feats[-1]) if cfg.has_memory else None
        stream = feats[-1]
        mem_feat: torch.Tensor | None = None
        skip: torch.Tensor | None = None
        mus: list[torch.Tensor] = []
        sigmas: list[torch.Tensor] = []
        b = img_masked.shape[0]

        for j in range(1, n):
            stream = self.dec_blocks[j - 1](mem_feat, skip, stream)
            if cfg.has_embedding_updates:
                c = c + self.embed_updates[j - 1](stream)
                if instrumentation is not None:
                    instrumentation["embedding_updates"] = (
                        instrumentation.get("embedding_updates", 0) + 1
                    )
            skip = feats[n - j - 1]  # encoder level at the new resolution
            if cfg.has_memory:
                spatial = stream.shape[-2:]
                if cfg.has_conditional_noise:
                    head = self.noise_heads[n - j - 1]
                    mu, sigma = head(skip, stream)
                    noise = sample_noise(mu, sigma, spatial, generator)
                    mus.append(mu)
                    sigmas.append(sigma)
                else:
                    noise = torch.randn(b, 1, *spatial, generator=generator,
                                        dtype=stream.dtype)
                slot = self.slot_convs[j - 1](skip)
                prev = (self.memory.const.expand(b, -1, -1, -1)
                        if j == 1 else mem_feat)
                mem_feat = self.memory.blocks[j - 1](prev, slot, c, noise)
                if instrumentation is not None:
                    instrumentation["memory_queries"] = (
                        instrumentation.get("memory_queries", 0) + 1
                    )

        head_in = torch.cat([stream, mem_feat], dim=1) if cfg.has_memory else stream
        out = torch.tanh(self.out_conv(head_in))
        return out, {"mu": mus, "sigma": sigmas}

    # ------------------------------------------------------------------ #

    def update_embedding(self, c_prev: torch.Tensor, f_dec: torch.Tensor,
                         step: int = 1) -> torch.Tensor:
        """Additive embedding-pool update: f_c(decoder features) + previous c."""
        if self.embed_updates is None:
            raise ConfigurationError(
                f"variant {self.cfg.variant!r} has no embedding updates"
            )
        return self.embed_updates[step - 1](f_dec) + c_prev

    def memory_parameters(self):
        return [] if self.memory is None else list(self.memory.parameters())

    def freeze_memory(self) -> None:
        for p in self.memory_parameters():
            p.requires_grad_(False)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def infer(
        self,
        img: np.ndarray,
        mask: np.ndarray,
        seed: int = 0,
        require_pretrained: bool = True,
    ) -> np.ndarray:
        """Single-image inference: mask the input, run the network once with a
        seeded generator, and return the raw [-1, 1] output (C, H, W)."""
        if self.cfg.has_memory and require_pretrained and not self.memory_pretrained:
            raise ConfigurationError(
                "generative memory was never loaded from a pre-trained "
                "checkpoint; pass require_pretrained=False only in tests"
            )
        masked = imaging.apply_mask(img.astype(np.float32), mask)
        img_t = torch.from_numpy(masked)[None]
        mask_t = torch.from_numpy(mask.astype(np.float32))[None, None]
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            out, _ = self.forward(img_t, mask_t, generator=gen)
        return out[0].numpy()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
