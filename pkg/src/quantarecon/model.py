"""Hybrid 3D/2D residual U-Net.

The first ``z_conv_levels`` levels convolve over (t, h, w) with 3x3x3
kernels; deeper levels use 1x3x3 kernels so the temporal receptive field
stops growing. Downsampling is max-pooling, upsampling is sub-pixel
shuffling followed by a 1x1x1 convolution.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import RandomSource

GN_EPS = 1e-5


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    start_features: int = 8
    depth_scale: int = 2
    z_conv_levels: int = 1
    groups: int = 4
    up_mode: str = "pixelshuffle"
    down_mode: str = "maxpool"
    activation: str = "gelu"

    def __post_init__(self):
        if self.depth < 1:
            raise ModelConfigError("depth must be >= 1")
        if not 0 <= self.z_conv_levels <= self.depth:
            raise ModelConfigError("z_conv_levels must lie in [0, depth]")
        if self.depth_scale < 1 or self.start_features < 1 or self.groups < 1:
            raise ModelConfigError("start_features, depth_scale and groups must be >= 1")
        if self.start_features % self.groups:
            raise ModelConfigError(
                f"start_features={self.start_features} not divisible by groups={self.groups}"
            )
        for i in range(1, self.depth):
            f_hi, f_lo = self.features(i), self.features(i - 1)
            r = 8 if self.temporal_pool(i - 1) else 4
            if f_hi % r:
                raise ModelConfigError(
                    f"level {i} has {f_hi} features, not divisible by shuffle factor {r}"
                )
            if f_lo % self.groups:
                raise ModelConfigError(f"level {i - 1} features not divisible by groups")
        if (self.up_mode, self.down_mode, self.activation) != ("pixelshuffle", "maxpool", "gelu"):
            raise ModelConfigError("only pixelshuffle / maxpool / gelu are implemented")

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls(depth=5, start_features=32, depth_scale=2, z_conv_levels=2, groups=8)

    def features(self, level: int) -> int:
        return self.start_features * self.depth_scale**level

    def is_3d(self, level: int) -> bool:
        return level < self.z_conv_levels

    def temporal_pool(self, level: int) -> bool:
        """Whether pooling from ``level`` to ``level + 1`` also halves t."""
        return self.is_3d(level + 1)

    def divisors(self) -> tuple[int, int]:
        """Required (temporal, spatial) divisibility of the input."""
        t_pools = sum(self.temporal_pool(i) for i in range(self.depth - 1))
        return 2**t_pools, 2 ** (self.depth - 1)

    def check_input(self, shape) -> None:
        dt, ds = self.divisors()
        t, h, w = shape[-3:]
        if t % dt or h % ds or w % ds:
            raise ModelConfigError(
                f"input (t,h,w)=({t},{h},{w}) must be divisible by ({dt},{ds},{ds})"
            )

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    Each level block holds three convolutions (weights + bias) each followed
    by a group norm (scale + shift). A down block at level i maps
    ``f[i-1] -> f[i]`` (the first maps the single input channel), an up block
    at level i maps ``2 f[i] -> f[i]`` and is preceded by a 1x1x1 conv from
    ``f[i+1] / r`` to ``f[i]`` with ``r`` = 8 (temporal shuffle) or 4.
    The head is a 1x1x1 conv ``f[0] -> 1``.
    """
    def conv(cin, cout, k):
        return cin * cout * k + cout

    def block(cin, cout, k):
        return conv(cin, cout, k) + 2 * conv(cout, cout, k) + 3 * 2 * cout

    total = 0
    for i in range(cfg.depth):
        k = 27 if cfg.is_3d(i) else 9
        cin = 1 if i == 0 else cfg.features(i - 1)
        total += block(cin, cfg.features(i), k)
    for i in range(cfg.depth - 1):
        k = 27 if cfg.is_3d(i) else 9
        r = 8 if cfg.temporal_pool(i) else 4
        f = cfg.features(i)
        total += conv(cfg.features(i + 1) // r, f, 1) + block(2 * f, f, k)
    total += conv(cfg.features(0), 1, 1)
    return total


def group_norm(x: torch.Tensor, groups: int, scale: torch.Tensor, shift: torch.Tensor,
               eps: float = GN_EPS) -> torch.Tensor:
    """Normalize each group of channels over (channels-in-group, t, h, w).

    A constant group normalizes to zeros since the variance is floored by
    ``eps``.
    """
    if x.shape[1] % groups:
        raise ModelConfigError(f"{x.shape[1]} channels not divisible by {groups} groups")
    y = F.group_norm(x, groups, scale, shift, eps)
    xg = x.detach().reshape(x.shape[0], groups, -1)
    const = xg.amax(-1) == xg.amin(-1)
    # rounding in the fused mean leaves ~1e-6 residue on constant groups
    per_channel = const.repeat_interleave(x.shape[1] // groups, dim=1)
    per_channel = per_channel.reshape(x.shape[:2] + (1,) * (x.ndim - 2))
    return torch.where(per_channel, shift.reshape((1, -1) + (1,) * (x.ndim - 2)).to(y.dtype), y)


def max_pool(x: torch.Tensor, kernel: tuple[int, int, int]) -> torch.Tensor:
    return F.max_pool3d(x, kernel)


def pixel_shuffle(x: torch.Tensor, temporal: bool) -> torch.Tensor:
    """Sub-pixel rearrangement of a (B, C*r, T, H, W) tensor.

    With ``temporal`` the factor is 2 along t, h and w (r=8) and input
    channel ``c*8 + a*4 + i*2 + j`` lands at ``(c, 2t+a, 2h+i, 2w+j)``;
    otherwise only h and w are doubled (r=4), channel ``c*4 + i*2 + j`` going
    to ``(c, t, 2h+i, 2w+j)``.
    """
    b, c, t, h, w = x.shape
    ft = 2 if temporal else 1
    r = ft * 4
    if c % r:
        raise ModelConfigError(f"{c} channels not divisible by shuffle factor {r}")
    x = x.reshape(b, c // r, ft, 2, 2, t, h, w)
    x = x.permute(0, 1, 5, 2, 6, 3, 7, 4)
    return x.reshape(b, c // r, t * ft, h * 2, w * 2)


class _GroupNorm(nn.Module):
    def __init__(self, groups: int, channels: int):
        super().__init__()
        self.groups = groups
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_norm(x, self.groups, self.weight, self.bias)


class ConvBlock(nn.Module):
    """conv-norm-gelu, conv-norm-gelu (+ residual), conv-norm-gelu."""

    def __init__(self, cin: int, cout: int, is_3d: bool, groups: int):
        super().__init__()
        k, pad = ((3, 3, 3), (1, 1, 1)) if is_3d else ((1, 3, 3), (0, 1, 1))
        self.conv1 = nn.Conv3d(cin, cout, k, padding=pad)
        self.norm1 = _GroupNorm(groups, cout)
        self.conv2 = nn.Conv3d(cout, cout, k, padding=pad)
        self.norm2 = _GroupNorm(groups, cout)
        self.conv3 = nn.Conv3d(cout, cout, k, padding=pad)
        self.norm3 = _GroupNorm(groups, cout)

    def forward(self, x):
        h1 = F.gelu(self.norm1(self.conv1(x)))
        h2 = F.gelu(self.norm2(self.conv2(h1))) + h1
        return F.gelu(self.norm3(self.conv3(h2)))


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int, is_3d: bool, temporal: bool, groups: int):
        super().__init__()
        self.temporal = temporal
        r = 8 if temporal else 4
        self.proj = nn.Conv3d(cin // r, cout, 1)
        self.block = ConvBlock(2 * cout, cout, is_3d, groups)

    def forward(self, x, skip):
        x = self.proj(pixel_shuffle(x, self.temporal))
        return self.block(torch.cat([x, skip], dim=1))


class ResUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.down = nn.ModuleList()
        for i in range(cfg.depth):
            cin = 1 if i == 0 else cfg.features(i - 1)
            self.down.append(ConvBlock(cin, cfg.features(i), cfg.is_3d(i), cfg.groups))
        self.up = nn.ModuleList()
        for i in range(cfg.depth - 1):
            self.up.append(UpBlock(cfg.features(i + 1), cfg.features(i), cfg.is_3d(i),
                                   cfg.temporal_pool(i), cfg.groups))
        self.head = nn.Conv3d(cfg.features(0), 1, 1)

    def forward(self, x):
        self.cfg.check_input(x.shape)
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < self.cfg.depth - 1:
                skips.append(x)
                k = (2, 2, 2) if self.cfg.temporal_pool(i) else (1, 2, 2)
                x = max_pool(x, k)
        for i in reversed(range(self.cfg.depth - 1)):
            x = self.up[i](x, skips[i])
        return self.head(x)


@dataclass
class ModelState:
    """Model parameters plus the configuration they were built for."""

    config: ModelConfig
    net: ResUNet
    seed: Optional[int] = None

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.net.named_parameters())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def fingerprint(self) -> str:
        layout = [(n, tuple(p.shape)) for n, p in self.net.named_parameters()]
        blob = json.dumps([self.config.fingerprint(), layout]).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to(self, dtype: torch.dtype) -> "ModelState":
        self.net.to(dtype)
        return self


def init(cfg: ModelConfig, rng: RandomSource) -> ModelState:
    """Build a network with fan-in uniform kernels and zero biases.

    Kernels are drawn from U(-b, b) with ``b = sqrt(1 / fan_in)``; group
    norm scales are 1 and shifts 0. Draws come from ``rng`` in parameter
    name order, independent of torch's global generator.
    """
    net = ResUNet(cfg)
    gen = rng.generator()
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("weight") and p.ndim == 5:
                fan_in = p.shape[1] * math.prod(p.shape[2:])
                b = math.sqrt(1.0 / fan_in)
                p.copy_(torch.from_numpy(gen.uniform(-b, b, size=p.shape).astype(np.float32)))
            elif ".norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return ModelState(cfg, net, seed=rng.seed)


@dataclass
class ForwardCache:
    input: torch.Tensor
    logits: torch.Tensor


def forward(m: ModelState, x, train_mode: bool = False):
    """Run the network on a (B, 1, T, H, W) tensor.

    With ``train_mode`` returns ``(logits, cache)`` where the cache keeps the
    autograd graph for :func:`backward`; otherwise returns detached logits.
    """
    x = torch.as_tensor(x)
    if x.ndim != 5 or x.shape[1] != 1:
        raise ModelConfigError(f"expected input of shape (B, 1, T, H, W), got {tuple(x.shape)}")
    dtype = next(m.net.parameters()).dtype
    x = x.to(dtype)
    if not train_mode:
        with torch.no_grad():
            return m.net(x)
    logits = m.net(x)
    return logits, ForwardCache(x, logits)


def backward(m: ModelState, cache: ForwardCache, grad_logits) -> dict[str, torch.Tensor]:
    """Parameter gradients of a scalar loss given its gradient w.r.t. logits."""
    grad_logits = torch.as_tensor(grad_logits, dtype=cache.logits.dtype)
    if grad_logits.shape != cache.logits.shape:
        raise ModelConfigError(
            f"gradient shape {tuple(grad_logits.shape)} does not match logits "
            f"{tuple(cache.logits.shape)}"
        )
    names, params = zip(*m.net.named_parameters())
    grads = torch.autograd.grad(cache.logits, params, grad_logits, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


class kernel_threads:
    """Pin torch's intra-op thread count inside a block.

    Convolution reductions are only bit-reproducible at a fixed intra-op
    thread count, so numerical work runs at 1 and parallelism is applied
    across independent samples or tiles instead.
    """

    def __init__(self, n: int = 1):
        self.n = n

    def __enter__(self):
        self.prev = torch.get_num_threads()
        torch.set_num_threads(self.n)
        return self

    def __exit__(self, *exc):
        torch.set_num_threads(self.prev)
