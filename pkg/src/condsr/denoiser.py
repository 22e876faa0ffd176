"""Conditional U-Net predicting x0 from (x_t, t, condition).

Architecture (all choices fixed; changing any of them changes checkpoints):

* input: channel concatenation ``[x_t, condition]`` -> 3x3 conv to ``base``
* time: sinusoidal embedding of t/T (``time_embedding``), then
  Linear(dim, 4*base) -> SiLU -> Linear(4*base, 4*base)
* down path: per level ``num_res_blocks`` residual blocks at
  ``base * mult``; a skip is taken after each level, then a stride-2 3x3
  conv (except after the last level)
* bottleneck: one residual block
* up path: concatenate the level's skip, ``num_res_blocks`` residual
  blocks, then nearest x2 upsampling + 3x3 conv to the next level's width
* output: GroupNorm -> SiLU -> 3x3 conv to image channels, zero-initialised

A residual block is ``GN -> SiLU -> conv3x3 (+ Linear(SiLU(temb)))
-> GN -> SiLU -> conv3x3`` plus a 1x1 conv shortcut when widths differ.
GroupNorm always uses 8 groups.

Parameters live outside the module in a name -> tensor dict and are
applied with ``torch.func.functional_call``, so training code can treat
them as plain values.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from . import rng

GROUPS = 8



@dataclass(frozen=True)
class ArchitectureConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 2
    time_embedding_dim: int = 128
    image_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if self.base_channels % GROUPS:
            raise ValueError(f"base_channels must be a multiple of {GROUPS}")
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty list of positive ints")
        if self.num_res_blocks < 1:
            raise ValueError("num_res_blocks must be >= 1")
        if self.time_embedding_dim < 2 or self.time_embedding_dim % 2:
            raise ValueError("time_embedding_dim must be even")
        if self.image_channels not in (1, 3):
            raise ValueError("image_channels must be 1 or 3")

    @property
    def input_channels(self) -> int:
        return 2 * self.image_channels

    @property
    def size_divisor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def check_size(self, height: int, width: int) -> None:
        d = self.size_divisor
        if height % d or width % d:
            raise ValueError(f"image size {height}x{width} not divisible by {d}")

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "num_res_blocks": self.num_res_blocks,
            "time_embedding_dim": self.time_embedding_dim,
            "image_channels": self.image_channels,
        }


def time_embedding(t: int, T: int, dim: int) -> np.ndarray:
    """Interleaved ``(sin(s*w_k), cos(s*w_k))`` pairs with s = t/T.

    Frequencies are ``w_k = pi * 10000**(2k/dim)`` for k = 0..dim/2-1.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    k = np.arange(dim // 2, dtype=np.float64)
    angles = (t / T) * math.pi * 10000.0 ** (2.0 * k / dim)
    out = np.empty(dim)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(GROUPS, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(GROUPS, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.shortcut = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return h + skip


class UNet(nn.Module):
    """Architecture template; parameters are supplied per call."""

    def __init__(self, config: ArchitectureConfig, T: int):
        super().__init__()
        self.config = config
        self.T = int(T)
        b, nr = config.base_channels, config.num_res_blocks
        widths = config.widths
        emb = 4 * b
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embedding_dim, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.conv_in = nn.Conv2d(config.input_channels, b, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c = b
        for i, w in enumerate(widths):
            self.down.append(nn.ModuleList(
                [ResBlock(c if j == 0 else w, w, emb) for j in range(nr)]))
            c = w
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.mid = ResBlock(c, c, emb)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.up.append(nn.ModuleList(
                [ResBlock(c + w if j == 0 else w, w, emb) for j in range(nr)]))
            c = w
            if i > 0:
                self.upsample.append(nn.Conv2d(w, widths[i - 1], 3, padding=1))
                c = widths[i - 1]
        self.norm_out = nn.GroupNorm(GROUPS, c)
        self.conv_out = nn.Conv2d(c, config.image_channels, 3, padding=1)

    def forward(self, x, temb):
        emb = self.time_mlp(temb)
        h = self.conv_in(x)
        skips = []
        for i, blocks in enumerate(self.down):
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for i, blocks in enumerate(self.up):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, emb)
            if i < len(self.upsample):
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))

    def param_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        return OrderedDict((n, tuple(p.shape)) for n, p in self.named_parameters())


def parameter_count(config: ArchitectureConfig) -> int:
    """Closed-form parameter count for ``UNet(config)``.

    conv(i, o, k) = i*o*k^2 + o, linear(i, o) = i*o + o, groupnorm(c) = 2c,
    resblock(i, o) = gn(i) + conv(i, o, 3) + linear(4b, o) + gn(o)
                     + conv(o, o, 3) + [i != o] conv(i, o, 1).
    """
    b, nr, widths = config.base_channels, config.num_res_blocks, config.widths
    emb = 4 * b

    def conv(i, o, k):
        return i * o * k * k + o

    def res(i, o):
        n = 2 * i + conv(i, o, 3) + emb * o + o + 2 * o + conv(o, o, 3)
        return n + (conv(i, o, 1) if i != o else 0)

    total = (config.time_embedding_dim * emb + emb) + (emb * emb + emb)
    total += conv(config.input_channels, b, 3)
    c = b
    for i, w in enumerate(widths):
        total += res(c, w) + (nr - 1) * res(w, w)
        c = w
        if i < len(widths) - 1:
            total += conv(w, w, 3)
    total += res(c, c)
    for i in reversed(range(len(widths))):
        w = widths[i]
        total += res(c + w, w) + (nr - 1) * res(w, w)
        c = w
        if i > 0:
            total += conv(w, widths[i - 1], 3)
            c = widths[i - 1]
    total += 2 * c + conv(c, config.image_channels, 3)
    return total


def init_params(net: UNet, seed: int, dtype=torch.float32) -> OrderedDict:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Applies to conv and linear weights and biases; GroupNorm scales are 1,
    offsets 0; the output conv is zero so the initial prediction is 0.
    Tensor i (in ``named_parameters`` order) draws from stream
    ``(seed, INIT, i)``.
    """
    modules = dict(net.named_modules())
    params = OrderedDict()
    for i, (name, p) in enumerate(net.named_parameters()):
        owner_name, kind = name.rsplit(".", 1)
        owner = modules[owner_name]
        if isinstance(owner, nn.GroupNorm):
            value = np.ones(p.shape) if kind == "weight" else np.zeros(p.shape)
        elif owner_name == "conv_out":
            value = np.zeros(p.shape)
        else:
            weight = owner.weight
            fan_in = int(np.prod(weight.shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            u = rng.generator(seed, rng.INIT, i).random(p.shape)
            value = (2.0 * u - 1.0) * bound
        params[name] = torch.tensor(value, dtype=dtype)
    return params


def _embed(net: UNet, t, batch: int, dtype) -> torch.Tensor:
    ts = [int(t)] * batch if np.ndim(t) == 0 else [int(v) for v in t]
    if len(ts) != batch:
        raise ValueError(f"{len(ts)} timesteps for a batch of {batch}")
    emb = np.stack([time_embedding(v, net.T, net.config.time_embedding_dim) for v in ts])
    return torch.tensor(emb, dtype=dtype)


def predict_x0(net: UNet, params, x_t: torch.Tensor, t, condition: torch.Tensor) -> torch.Tensor:
    """Batched f(x_t, t, condition); inputs are ``(B, C, H, W)``."""
    if x_t.shape != condition.shape:
        raise ValueError(f"latent shape {tuple(x_t.shape)} != condition shape {tuple(condition.shape)}")
    if x_t.ndim != 4 or x_t.shape[1] != net.config.image_channels:
        raise ValueError(f"expected (B, {net.config.image_channels}, H, W), got {tuple(x_t.shape)}")
    net.config.check_size(x_t.shape[2], x_t.shape[3])
    dtype = next(iter(params.values())).dtype
    x = torch.cat([x_t, condition], dim=1).to(dtype)
    return functional_call(net, params, (x, _embed(net, t, x_t.shape[0], dtype)))


def loss_and_grad(net: UNet, params, x_t, t, condition, x0):
    """Mean absolute error of the x0 prediction and its parameter gradients."""
    leaves = OrderedDict((n, p.detach().requires_grad_(True)) for n, p in params.items())
    pred = predict_x0(net, leaves, x_t, t, condition)
    loss = (pred - x0.to(pred.dtype)).abs().mean()
    grads = torch.autograd.grad(loss, list(leaves.values()))
    return loss.item(), OrderedDict(zip(leaves.keys(), grads))


@dataclass
class UNetDenoiser:
    """Single-image adapter used by the sampler."""

    net: UNet
    params: dict = field(repr=False)

    def predict(self, x_t: np.ndarray, t: int, condition: np.ndarray) -> np.ndarray:
        dtype = next(iter(self.params.values())).dtype
        with torch.no_grad():
            out = predict_x0(self.net, self.params,
                             torch.tensor(x_t[None], dtype=dtype), t,
                             torch.tensor(condition[None], dtype=dtype))
        return out[0].double().numpy()


@dataclass
class OracleDenoiser:
    ground_truth: np.ndarray

    def predict(self, x_t, t, condition) -> np.ndarray:
        return self.ground_truth.copy()


def oracle_denoiser(ground_truth) -> OracleDenoiser:
    """A denoiser that ignores its inputs and returns ``ground_truth``."""
    data = getattr(ground_truth, "data", ground_truth)
    return OracleDenoiser(np.array(data, dtype=np.float64))
