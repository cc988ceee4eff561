"""Densely cascaded multi-scale depth decoder.

Cascade stages run coarse to fine: stage 1 consumes the deepest encoder level
(1/16 resolution) and stage 4 the shallowest (1/2).  Each stage ``s``

* projects its encoder level to ``C'`` channels (stage 1 may use pyramid
  pooling instead),
* sums the projections of stages ``1..s`` after upsampling them to its own
  resolution (top-down addition),
* maps the sum through a 1x1 convolution and nonlinearity,
* concatenates the mapped features of stages ``1..s`` (dense concat),
  upsamples 2x and predicts a sigmoid disparity.

All 3x3 convolutions use reflection padding so constant maps stay constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .encoder import FeaturePyramid
from .numerics import ContractError, Tensor, ops
from .numerics.nn import Conv2d, Module, activation


@dataclass(frozen=True)
class DecoderConfig:
    proj_dim: int = 128
    ppm: bool = True
    topdown_add: bool = True
    dense_concat: bool = True
    ppm_sizes: tuple[int, ...] = (1, 2, 3, 6)
    activation: str = "elu"
    head_convs: int = 2

    def __post_init__(self):
        sizes = self.ppm_sizes
        if not sizes or sizes[0] != 1 or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ContractError(f"ppm_sizes must be strictly increasing and start at 1, got {sizes}")
        if self.ppm and self.proj_dim % len(sizes):
            raise ContractError(f"proj_dim {self.proj_dim} is not divisible by {len(sizes)} PPM branches")
        if self.head_convs < 1:
            raise ContractError("depth head needs at least one 3x3 convolution")
        activation(self.activation)


class DepthPyramid(NamedTuple):
    """Sigmoid disparities from coarse (1/8) to fine (1/1)."""

    d1: Tensor
    d2: Tensor
    d3: Tensor
    d4: Tensor

    def at_scale(self, level: int) -> Tensor:
        """Disparity at ``1/2**level`` of the input resolution."""
        return self[3 - level]


def conv3x3(rng, c_in: int, c_out: int) -> Conv2d:
    return Conv2d(rng, c_in, c_out, 3, pad_mode="reflect")


class PyramidPooling(Module):
    """Adaptive average pools of several sizes, fused with the input into ``C'`` channels."""

    def __init__(self, rng, c_in: int, c_out: int, sizes: Sequence[int], act: str):
        self.sizes = tuple(sizes)
        branch = c_out // len(self.sizes)
        self.branches = [Conv2d(rng, c_in, branch, 1) for _ in self.sizes]
        self.fuse = conv3x3(rng, c_in + branch * len(self.sizes), c_out)
        self.act = activation(act)

    def forward(self, f: Tensor) -> Tensor:
        h, w = f.shape[2:]
        parts = [f]
        for size, conv in zip(self.sizes, self.branches):
            pooled = self.act(conv(ops.avg_pool2d(f, size, size)))
            parts.append(ops.bilinear_resize(pooled, h, w))
        return self.fuse(ops.concat(parts, axis=1))


class DepthHead(Module):
    """3x3 convolutions with nonlinearity, then 1x1 to one channel and a sigmoid."""

    def __init__(self, rng, c_in: int, width: int, n_convs: int, act: str):
        self.convs = [conv3x3(rng, c_in if i == 0 else width, width) for i in range(n_convs)]
        self.out = Conv2d(rng, width, 1, 1)
        self.act = activation(act)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = self.act(conv(x))
        return ops.sigmoid(self.out(x))


class DCMNet(Module):
    def __init__(self, rng: np.random.Generator, encoder_channels: Sequence[int],
                 config: DecoderConfig = DecoderConfig()):
        """``encoder_channels`` lists pyramid channels fine to coarse, e.g. (C, 2C, 4C, 8C)."""
        if len(encoder_channels) != 4:
            raise ContractError("decoder expects four encoder levels")
        self.config = c = config
        cp = c.proj_dim
        coarse_first = list(reversed(encoder_channels))
        self.act = activation(c.activation)
        if c.ppm:
            self.ppm = PyramidPooling(rng, coarse_first[0], cp, c.ppm_sizes, c.activation)
            self.projections = [None] + [conv3x3(rng, ch, cp) for ch in coarse_first[1:]]
        else:
            self.ppm = None
            self.projections = [conv3x3(rng, ch, cp) for ch in coarse_first]
        self.feature_maps = [Conv2d(rng, cp, cp, 1) for _ in range(4)]
        self.heads = [DepthHead(rng, self.head_channels(s), cp, c.head_convs, c.activation)
                      for s in range(1, 5)]

    def head_channels(self, s: int) -> int:
        return s * self.config.proj_dim if self.config.dense_concat else self.config.proj_dim

    # -- the per-stage operations -------------------------------------------
    def project(self, s: int, f: Tensor) -> Tensor:
        """Stage ``s`` (1 = coarsest) input projection to ``C'`` channels."""
        if s == 1 and self.ppm is not None:
            return self.ppm(f)
        return self.projections[s - 1](f)

    def cascade_add(self, projected: Sequence[Tensor]) -> Tensor:
        """Top-down sum of projections ``f_1..f_s`` at the resolution of ``f_s``."""
        last = projected[-1]
        if not self.config.topdown_add:
            return last
        h, w = last.shape[2:]
        total = last
        for f in projected[:-1]:
            if f.shape[1] != last.shape[1]:
                raise ContractError(f"cannot add {f.shape[1]}-channel map to {last.shape[1]}-channel map")
            total = total + ops.bilinear_resize(f, h, w)
        return total

    def feature_map(self, s: int, x: Tensor) -> Tensor:
        return self.act(self.feature_maps[s - 1](x))

    def decode_stage(self, s: int, mapped: Sequence[Tensor]) -> Tensor:
        """Disparity of stage ``s`` from mapped features ``x'_1..x'_s`` (coarse to fine)."""
        if len(mapped) != s:
            raise ContractError(f"stage {s} needs {s} mapped feature maps, got {len(mapped)}")
        h, w = mapped[-1].shape[2:]
        if self.config.dense_concat:
            x = ops.concat([ops.bilinear_resize(m, h, w) for m in mapped], axis=1)
        else:
            x = mapped[-1]
        x = ops.bilinear_resize(x, 2 * h, 2 * w)
        return self.heads[s - 1](x)

    def forward(self, pyramid: FeaturePyramid, return_intermediates: bool = False):
        levels = list(reversed(pyramid))
        projected, mapped, disps = [], [], []
        for s in range(1, 5):
            projected.append(self.project(s, levels[s - 1]))
            mapped.append(self.feature_map(s, self.cascade_add(projected)))
            disps.append(self.decode_stage(s, mapped))
        out = DepthPyramid(*disps)
        if return_intermediates:
            return out, {"projected": projected, "mapped": mapped}
        return out


def decode(decoder: DCMNet, pyramid: FeaturePyramid) -> DepthPyramid:
    return decoder(pyramid)


def parameter_breakdown(decoder: DCMNet) -> dict[str, int]:
    out = {}
    if decoder.ppm is not None:
        out["ppm"] = decoder.ppm.num_parameters()
    out["projections"] = sum(p.num_parameters() for p in decoder.projections if p is not None)
    out["feature_maps"] = sum(m.num_parameters() for m in decoder.feature_maps)
    out["heads"] = sum(h.num_parameters() for h in decoder.heads)
    return out


def ablation_config(base: DecoderConfig, ablate: Optional[str]) -> DecoderConfig:
    """Decoder variants: ``no_ppm``, ``no_ta`` (top-down addition) and ``no_dc`` (dense concat)."""
    from dataclasses import replace

    if ablate in (None, "", "none", "full"):
        return base
    table = {"no_ppm": {"ppm": False}, "no_ta": {"topdown_add": False}, "no_dc": {"dense_concat": False}}
    if ablate not in table:
        raise ValueError(f"unknown ablation {ablate!r}; choose from {sorted(table)}")
    return replace(base, **table[ablate])
