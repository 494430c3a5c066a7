"""Primitive differentiable layers: instance norm, channel attention,
residual encoder/decoder blocks, modulated convolution with demodulation,
spectral normalization, and bilinear upsampling.

All modules operate on batched ``(B, C, H, W)`` tensors and draw their random
initial weights from an explicit ``torch.Generator`` so that model
construction is reproducible.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import InvalidInputError

IN_EPS = 1e-5
DEMOD_EPS = 1e-8
SN_EPS = 1e-12


def init_conv(conv: nn.Conv2d, generator: torch.Generator | None) -> None:
    """Kaiming-uniform weight and fan-in bias init from an explicit generator."""
    with torch.no_grad():
        nn.init.kaiming_uniform_(conv.weight, a=math.sqrt(5), generator=generator)
        if conv.bias is not None:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            bound = 1.0 / math.sqrt(fan_in)
            conv.bias.uniform_(-bound, bound, generator=generator)


def init_linear(fc: nn.Linear, generator: torch.Generator | None) -> None:
    with torch.no_grad():
        nn.init.kaiming_uniform_(fc.weight, a=math.sqrt(5), generator=generator)
        if fc.bias is not None:
            bound = 1.0 / math.sqrt(fc.in_features)
            fc.bias.uniform_(-bound, bound, generator=generator)


def instance_norm(x: torch.Tensor, eps: float = IN_EPS) -> torch.Tensor:
    """Per-sample, per-channel normalization to zero mean and unit variance."""
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class InstanceNorm(nn.Module):
    """Instance normalization with a learned per-channel affine (init 1, 0)."""

    def __init__(self, channels: int, eps: float = IN_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = instance_norm(x, self.eps)
        return y * self.weight[:, None, None] + self.bias[:, None, None]


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate: global pool, two FC layers, sigmoid scale."""

    def __init__(self, channels: int, reduction: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        init_linear(self.fc1, generator)
        init_linear(self.fc2, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(-2, -1))
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))
        return x * gate[:, :, None, None]


class EncoderBlock(nn.Module):
    """Downsampling residual block: stride-2 conv, IN, ReLU, then a
    channel-attended residual branch. Halves the spatial dimensions (ceil).
    """

    def __init__(self, in_channels: int, out_channels: int, reduction: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.norm1 = InstanceNorm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = InstanceNorm(out_channels)
        self.attn = ChannelAttention(out_channels, reduction, generator)
        init_conv(self.conv1, generator)
        init_conv(self.conv2, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat = F.relu(self.norm1(self.conv1(x)))
        return feat + self.attn(F.relu(self.norm2(self.conv2(feat))))


class DecoderBlock(nn.Module):
    """Upsampling residual block over the concatenation of memory features,
    encoder skip features, and the running decoder stream (any of the first
    two may be absent). Doubles the spatial dimensions.
    """

    def __init__(self, in_channels: int, out_channels: int, reduction: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm1 = InstanceNorm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = InstanceNorm(out_channels)
        self.attn = ChannelAttention(out_channels, reduction, generator)
        init_conv(self.conv1, generator)
        init_conv(self.conv2, generator)

    def forward(
        self,
        f_mem: torch.Tensor | None,
        f_enc: torch.Tensor | None,
        f_dec: torch.Tensor,
    ) -> torch.Tensor:
        parts = [p for p in (f_mem, f_enc, f_dec) if p is not None]
        spatial = parts[0].shape[-2:]
        if any(p.shape[-2:] != spatial for p in parts):
            raise InvalidInputError(
                f"decoder block inputs are not co-shaped: "
                f"{[tuple(p.shape) for p in parts]}"
            )
        x = torch.cat(parts, dim=1) if len(parts) > 1 else parts[0]
        if x.shape[1] != self.in_channels:
            raise InvalidInputError(
                f"decoder block expected {self.in_channels} channels, got {x.shape[1]}"
            )
        x = bilinear_upsample(x, 2)
        feat = F.relu(self.norm1(self.conv1(x)))
        return feat + self.attn(F.relu(self.norm2(self.conv2(feat))))


def demodulated_weights(
    weight: torch.Tensor,
    style: torch.Tensor,
    demodulate: bool = True,
    eps: float = DEMOD_EPS,
) -> torch.Tensor:
    """Per-input-channel modulation of conv weights followed by per-output-
    channel L2 renormalization.

    ``weight`` is (C_out, C_in, k, k); ``style`` is (C_in,) or (B, C_in).
    Returns (B, C_out, C_in, k, k) for batched styles, else (C_out, C_in, k, k).
    """
    squeeze = style.dim() == 1
    if squeeze:
        style = style[None]
    if style.shape[1] != weight.shape[1]:
        raise InvalidInputError(
            f"style length {style.shape[1]} != conv in_channels {weight.shape[1]}"
        )
    w = weight[None] * style[:, None, :, None, None]
    if demodulate:
        denom = torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + eps)
        w = w * denom
    return w[0] if squeeze else w


def modulated_conv2d(
    x: torch.Tensor,
    style: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    demodulate: bool = True,
    eps: float = DEMOD_EPS,
) -> torch.Tensor:
    """Style-modulated (and optionally demodulated) 3x3-style convolution,
    run as a grouped convolution with one weight set per batch sample.
    """
    b, c_in, h, w_sp = x.shape
    c_out, _, kh, kw = weight.shape
    if style.dim() == 1:
        style = style[None].expand(b, -1)
    w = demodulated_weights(weight, style, demodulate, eps)
    out = F.conv2d(
        x.reshape(1, b * c_in, h, w_sp),
        w.reshape(b * c_out, c_in, kh, kw),
        padding=(kh // 2, kw // 2),
        groups=b,
    ).view(b, c_out, h, w_sp)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


POWER_BLOCK = 4


def init_power_state(rows: int, cols: int,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Orthonormal starting block for the subspace power iteration."""
    width = max(1, min(POWER_BLOCK, rows, cols))
    q, _ = torch.linalg.qr(torch.randn(rows, width, generator=generator))
    return q


def spectral_normalize(
    weight_mat: torch.Tensor,
    u: torch.Tensor,
    iters: int = 1,
    eps: float = SN_EPS,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Divide a 2-D weight matrix by its power-iteration top singular value.

    ``u`` is the power-iteration state: either a single vector or an
    orthonormal block (see :func:`init_power_state`); block iteration with a
    small Ritz problem converges much faster on matrices with clustered
    singular values. Returns ``(normalized_matrix, u_new, sigma)``. The
    iteration runs without gradient; the returned sigma keeps the gradient
    path through the weight so the normalized matrix is differentiable. A
    zero matrix yields sigma 0 and is returned as zeros (guarded by ``eps``).
    """
    if iters < 1:
        raise InvalidInputError(f"power iteration needs iters >= 1, got {iters}")
    single = u.dim() == 1
    with torch.no_grad():
        if single or u.shape[1] == 1:
            uv = u.reshape(-1)
            v = None
            for _ in range(iters):
                v = F.normalize(weight_mat.t().mv(uv), dim=0, eps=eps)
                uv = F.normalize(weight_mat.mv(v), dim=0, eps=eps)
            u_top, v_top, state = uv, v, (uv if single else uv[:, None])
        else:
            block = u
            v_block = None
            for _ in range(iters):
                v_block, _ = torch.linalg.qr(weight_mat.t() @ block)
                block, _ = torch.linalg.qr(weight_mat @ v_block)
            ritz = block.t() @ weight_mat @ v_block
            rb_u, _, rb_vt = torch.linalg.svd(ritz)
            u_top = block @ rb_u[:, 0]
            v_top = v_block @ rb_vt[0, :]
            state = block
    sigma = torch.dot(u_top, weight_mat.mv(v_top))
    return weight_mat / sigma.clamp(min=eps), state, sigma


class SNConv2d(nn.Module):
    """Conv2d whose weight is spectrally normalized at every forward pass.

    Power-iteration vectors persist as a buffer and are updated in training
    mode only, from a single thread by contract.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, n_power_iterations: int = 1,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.n_power_iterations = n_power_iterations
        self.weight = nn.Parameter(
            torch.empty(out_channels, in_channels, kernel_size, kernel_size)
        )
        self.bias = nn.Parameter(torch.zeros(out_channels))
        with torch.no_grad():
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5), generator=generator)
        fan_in = in_channels * kernel_size * kernel_size
        self.register_buffer("u", init_power_state(out_channels, fan_in, generator))

    def normalized_weight(self, update_state: bool | None = None) -> torch.Tensor:
        mat = self.weight.reshape(self.weight.shape[0], -1)
        w_hat, u_new, _ = spectral_normalize(mat, self.u, self.n_power_iterations)
        if update_state if update_state is not None else self.training:
            with torch.no_grad():
                self.u.copy_(u_new)
        return w_hat.view_as(self.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.normalized_weight(), self.bias,
                        stride=self.stride, padding=self.padding)


def bilinear_upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Standard align-corners-false bilinear upsampling by an integer factor."""
    if factor < 2:
        raise InvalidInputError(f"upsample factor must be >= 2, got {factor}")
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
