"""Generators, attention networks and mask-gated patch discriminators."""
from __future__ import annotations

import enum
import hashlib
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_synth import ClassMask, ShapeError

INIT_STD = 0.02


class Role(str, enum.Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"
    ATTENTION = "attention"


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> nn.Module:
    """Zero-mean Gaussian weights (std 0.02) and zero biases, drawn from ``generator``."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * INIT_STD)
    return module


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder / residual / decoder network with a sigmoid output in [0, 1].

    With ``out_channels=1`` the same trunk serves as an attention network.
    """

    def __init__(self, in_channels: int = 3, out_channels: int = 3, filters: int = 8,
                 downsamplings: int = 2, res_blocks: int = 2, role: Role = Role.GENERATOR):
        super().__init__()
        self.role = Role(role)
        self.arch = {
            "kind": "generator",
            "role": self.role.value,
            "in_channels": in_channels,
            "out_channels": out_channels,
            "filters": filters,
            "downsamplings": downsamplings,
            "res_blocks": res_blocks,
        }
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3), nn.Conv2d(in_channels, filters, 7), nn.InstanceNorm2d(filters), nn.ReLU(),
        ]
        ch = filters
        for _ in range(downsamplings):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2), nn.ReLU()]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(res_blocks)]
        for _ in range(downsamplings):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, out_channels, 7)]
        self.model = nn.Sequential(*layers)
        self.in_channels = in_channels
        self.downsamplings = downsamplings

    def check_input(self, x: torch.Tensor) -> None:
        step = 2 ** self.downsamplings
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % step or w % step or min(h, w) // step < 2:
            raise ShapeError(f"input {h}x{w} incompatible with {self.downsamplings} downsamplings")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return torch.sigmoid(self.model(x))


def attention_network(in_channels: int = 3, filters: int = 8, downsamplings: int = 2,
                      res_blocks: int = 2) -> Generator:
    return Generator(in_channels, 1, filters, downsamplings, res_blocks, role=Role.ATTENTION)


def downsample_mask(mask, size: tuple[int, int]):
    """Max-pool a binary mask to ``size``: a coarse cell is on iff any fine pixel is.

    Accepts a ``ClassMask``, a 2-D array or an ``(N, 1, H, W)`` tensor and returns
    the same kind of object.
    """
    if isinstance(mask, ClassMask):
        return ClassMask(downsample_mask(mask.mask, size), mask.class_id)
    if isinstance(mask, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None, None]
        return downsample_mask(t, size)[0, 0].numpy().astype(mask.dtype)
    h, w = mask.shape[-2:]
    th, tw = size
    if th <= 0 or tw <= 0 or h % th or w % tw:
        raise ShapeError(f"cannot downsample {h}x{w} mask to {th}x{tw}")
    if (th, tw) == (h, w):
        return mask
    return F.max_pool2d(mask, kernel_size=(h // th, w // tw))


class MaskedPatchDiscriminator(nn.Module):
    """PatchGAN discriminator with a MaskLayer after every block and at the output.

    ``blocks`` stride-2 convolutions (kernel 4, padding 1) are followed by a
    one-channel 3x3 head, so an ``H x W`` input yields an ``H/2**blocks`` square
    patch grid. The input itself is never masked.
    """

    kernel = 4
    padding = 1

    def __init__(self, in_channels: int = 3, filters: int = 16, blocks: int = 3):
        super().__init__()
        self.role = Role.DISCRIMINATOR
        self.arch = {"kind": "discriminator", "role": self.role.value, "in_channels": in_channels,
                     "filters": filters, "blocks": blocks}
        self.blocks = nn.ModuleList()
        ch_in, ch = in_channels, filters
        for i in range(blocks):
            self.blocks.append(nn.Sequential(
                nn.Conv2d(ch_in, ch, self.kernel, stride=2, padding=self.padding),
                nn.LeakyReLU(0.2),
            ))
            ch_in, ch = ch, min(ch * 2, filters * 8)
        self.head = nn.Conv2d(ch_in, 1, 3, stride=1, padding=1)
        self.depth = blocks
        self.in_channels = in_channels

    @property
    def locality_radius(self) -> int:
        """Chebyshev reach of the first block beyond its max-pooled mask window."""
        return max(2 - 1 + self.padding, self.kernel - 1 - self.padding)

    def patch_size(self, height: int, width: int) -> tuple[int, int]:
        return height // 2 ** self.depth, width // 2 ** self.depth

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        step = 2 ** self.depth
        if h % step or w % step:
            raise ShapeError(f"input {h}x{w} not divisible by {step}")
        if mask is None:
            for block in self.blocks:
                x = block(x)
            return self.head(x)
        if mask.dim() == 3:
            mask = mask[:, None]
        if mask.shape[0] != x.shape[0] or mask.shape[-2:] != x.shape[-2:]:
            raise ShapeError(f"mask {tuple(mask.shape)} does not match input {tuple(x.shape)}")
        mask = mask.to(x.dtype)
        n = self.patch_size(h, w)
        if not bool(mask.any()):
            return x.new_zeros(x.shape[0], 1, *n)
        for block in self.blocks:
            x = block(x)
            x = x * downsample_mask(mask, x.shape[-2:])
        return self.head(x) * downsample_mask(mask, n)


def compose_translation(image: torch.Tensor, generated: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Blend ``generated`` into ``image`` where ``attention`` is high.

    ``attention`` has one channel and is broadcast across the colour channels.
    """
    if image.shape != generated.shape:
        raise ShapeError(f"image {tuple(image.shape)} and generated {tuple(generated.shape)} differ")
    if attention.dim() == image.dim() - 1:
        attention = attention.unsqueeze(-3)
    if attention.shape[-2:] != image.shape[-2:] or attention.shape[-3] != 1:
        raise ShapeError(f"attention {tuple(attention.shape)} does not match image {tuple(image.shape)}")
    return attention * generated + (1.0 - attention) * image


def build_network(arch: dict) -> nn.Module:
    if arch["kind"] == "generator":
        return Generator(arch["in_channels"], arch["out_channels"], arch["filters"],
                         arch["downsamplings"], arch["res_blocks"], role=arch["role"])
    if arch["kind"] == "discriminator":
        return MaskedPatchDiscriminator(arch["in_channels"], arch["filters"], arch["blocks"])
    if arch["kind"] == "detector":
        from .evaluation import ToyDetector

        return ToyDetector(arch["in_channels"], arch["filters"], arch["layers"])
    raise ValueError(f"unknown network kind {arch['kind']!r}")


def flat_parameters(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def parameter_digest(modules: Sequence[nn.Module]) -> str:
    h = hashlib.sha256()
    for m in modules:
        for p in m.parameters():
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
