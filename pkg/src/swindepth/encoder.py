"""Convolution-free hierarchical encoder built from windowed self-attention blocks.

Tokens are kept as ``(B, h*w, C)`` arrays in row-major spatial order inside a
stage; stage outputs are returned as NCHW feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .numerics import ContractError, Tensor, ops
from .numerics.nn import LayerNorm, Linear, Module, Parameter, trunc_normal


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    window: int = 4
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (2, 4, 8, 16)
    mlp_ratio: float = 4.0
    rel_pos_bias: bool = True
    shifted: bool = True
    in_channels: int = 3

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ContractError("encoder needs exactly four stages")
        if self.window < 1:
            raise ContractError("window must be positive")
        if self.shifted and self.window % 2:
            raise ContractError("shifted windows need an even window size")
        for i, (d, h) in enumerate(zip(self.depths, self.heads)):
            if d < 1:
                raise ContractError(f"stage {i} has no blocks")
            if self.shifted and d % 2:
                raise ContractError(f"stage {i} depth {d} is odd; W-MSA/SW-MSA blocks come in pairs")
            if self.stage_dim(i) % h:
                raise ContractError(f"stage {i}: {h} heads do not divide {self.stage_dim(i)} channels")

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * 2 ** i


class FeaturePyramid(NamedTuple):
    """Encoder outputs at 1/2, 1/4, 1/8 and 1/16 of the input resolution."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor


def tokens_to_nchw(x: Tensor, h: int, w: int) -> Tensor:
    B, _, C = x.shape
    return ops.transpose(x.reshape(B, h, w, C), (0, 3, 1, 2))


def nchw_to_tokens(x: Tensor) -> Tensor:
    B, C, h, w = x.shape
    return ops.transpose(x, (0, 2, 3, 1)).reshape(B, h * w, C)


def space_to_depth(x: Tensor) -> Tensor:
    """(B, h, w, C) -> (B, h/2, w/2, 4C), sub-pixel order (0,0), (1,0), (0,1), (1,1)."""
    B, h, w, C = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"spatial size {h}x{w} is not even")
    x = x.reshape(B, h // 2, 2, w // 2, 2, C)
    # axes: B, i, dy, j, dx, C  ->  B, i, j, dx, dy, C   so channel blocks go (dy,dx) = 00, 10, 01, 11
    return ops.transpose(x, (0, 1, 3, 4, 2, 5)).reshape(B, h // 2, w // 2, 4 * C)


def depth_to_space(x: Tensor) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    B, h, w, C4 = x.shape
    C = C4 // 4
    x = x.reshape(B, h, w, 2, 2, C)
    return ops.transpose(x, (0, 1, 4, 2, 3, 5)).reshape(B, 2 * h, 2 * w, C)


class PatchEmbed(Module):
    """Non-overlapping 2x2 patches flattened and linearly projected to ``C`` channels."""

    def __init__(self, rng, in_channels: int, dim: int):
        self.proj = Linear(rng, 4 * in_channels, dim)

    def forward(self, image: Tensor) -> Tensor:
        B, _, H, W = image.shape
        if H % 2 or W % 2:
            raise ContractError(f"image size {H}x{W} is not divisible by the 2x2 patch")
        x = ops.transpose(image, (0, 2, 3, 1))
        return ops.transpose(self.proj(space_to_depth(x)), (0, 3, 1, 2))


def relative_position_index(window: int, table_window: Optional[int] = None) -> np.ndarray:
    """(N, N) rows of the bias table for every query/key pair of a ``window``-sized tile.

    ``table_window`` is the window the table was built for (defaults to ``window``);
    a smaller tile reuses the central offsets.
    """
    tw = window if table_window is None else table_window
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (tw - 1)
    return rel[0] * (2 * tw - 1) + rel[1]


def shift_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive attention mask (n_windows, N, N) for cyclically shifted windows.

    Positions that only share a window because of the cyclic wrap-around get
    ``-inf`` so they never attend to each other.
    """
    labels = np.zeros((h, w), dtype=int)
    cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    n = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = n
            n += 1
    win = labels.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3)
    win = win.reshape(-1, window * window)
    same = win[:, :, None] == win[:, None, :]
    return np.where(same, 0.0, -np.inf)


class WindowAttention(Module):
    def __init__(self, rng, dim: int, heads: int, window: int, rel_pos_bias: bool = True):
        if dim % heads:
            raise ContractError(f"{heads} heads do not divide {dim} channels")
        self.dim, self.heads, self.window = dim, heads, window
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        self.scale = (dim // heads) ** -0.5
        if rel_pos_bias:
            self.bias_table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
            self._index = relative_position_index(window).ravel()
        else:
            self.bias_table = None

    def _split_heads(self, x: Tensor) -> Tensor:
        Bn, N, C = x.shape
        return ops.transpose(x.reshape(Bn, N, self.heads, C // self.heads), (0, 2, 1, 3))

    def forward(self, x: Tensor, h: int, w: int, shift: int = 0, return_attention: bool = False):
        B, L, C = x.shape
        ws = self.window
        if min(h, w) <= ws:
            # the whole map fits in one window along its short side: no shift needed
            ws, shift = min(h, w), 0
        if L != h * w:
            raise ContractError(f"{L} tokens do not match resolution {h}x{w}")
        if h % ws or w % ws:
            raise ContractError(f"resolution {h}x{w} is not divisible by window {ws}")
        if shift not in (0, self.window // 2):
            raise ContractError(f"shift must be 0 or {ws // 2}")
        nh, nw, N = h // ws, w // ws, ws * ws

        x = x.reshape(B, h, w, C)
        if shift:
            x = ops.roll(x, (-shift, -shift), (1, 2))
        x = ops.transpose(x.reshape(B, nh, ws, nw, ws, C), (0, 1, 3, 2, 4, 5)).reshape(B * nh * nw, N, C)

        q = self._split_heads(self.q(x)) * self.scale
        k = self._split_heads(self.k(x))
        v = self._split_heads(self.v(x))
        scores = q @ ops.transpose(k, (0, 1, 3, 2))
        if self.bias_table is not None:
            index = self._index if ws == self.window else relative_position_index(ws, self.window).ravel()
            bias = ops.take(self.bias_table, index).reshape(N, N, self.heads)
            scores = scores + ops.transpose(bias, (2, 0, 1))
        if shift:
            mask = shift_mask(h, w, ws, shift).astype(scores.dtype)
            scores = (scores.reshape(B, nh * nw, self.heads, N, N) + mask[None, :, None]).reshape(
                B * nh * nw, self.heads, N, N)
        attn = ops.softmax_lastdim(scores)
        y = ops.transpose(attn @ v, (0, 2, 1, 3)).reshape(B * nh * nw, N, C)
        y = self.proj(y)

        y = ops.transpose(y.reshape(B, nh, nw, ws, ws, C), (0, 1, 3, 2, 4, 5)).reshape(B, h, w, C)
        if shift:
            y = ops.roll(y, (shift, shift), (1, 2))
        y = y.reshape(B, L, C)
        if return_attention:
            return y, attn.data.reshape(B, nh * nw, self.heads, N, N)
        return y


class Mlp(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm (shifted-)window attention followed by a pre-norm MLP, both residual."""

    def __init__(self, rng, dim: int, heads: int, window: int, shift: int,
                 mlp_ratio: float = 4.0, rel_pos_bias: bool = True):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, heads, window, rel_pos_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))
        self.shift = shift

    def forward(self, z: Tensor, h: int, w: int) -> Tensor:
        z = self.attn(self.norm1(z), h, w, self.shift) + z
        return self.mlp(self.norm2(z)) + z


class PatchMerging(Module):
    """Concatenate 2x2 neighbours (4C), LayerNorm, project to 2C."""

    def __init__(self, rng, dim: int):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(rng, 4 * dim, 2 * dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        """(B, C, h, w) -> (B, 2C, h/2, w/2)."""
        merged = space_to_depth(ops.transpose(x, (0, 2, 3, 1)))
        return ops.transpose(self.reduction(self.norm(merged)), (0, 3, 1, 2))

    def tokens(self, x: Tensor, h: int, w: int) -> Tensor:
        B, _, C = x.shape
        merged = space_to_depth(x.reshape(B, h, w, C))
        return self.reduction(self.norm(merged)).reshape(B, (h // 2) * (w // 2), 2 * C)


def block_pair(rng, dim: int, heads: int, window: int, mlp_ratio: float = 4.0,
               rel_pos_bias: bool = True) -> list[TransformerBlock]:
    """A W-MSA block followed by an SW-MSA block."""
    return [TransformerBlock(rng, dim, heads, window, s, mlp_ratio, rel_pos_bias)
            for s in (0, window // 2)]


class SwinEncoder(Module):
    def __init__(self, rng: np.random.Generator, config: EncoderConfig = EncoderConfig()):
        self.config = config
        c = config
        self.patch_embed = PatchEmbed(rng, c.in_channels, c.embed_dim)
        self.stages = []
        self.merges = []
        self.out_norms = []
        for i in range(4):
            dim = c.stage_dim(i)
            blocks = [
                TransformerBlock(rng, dim, c.heads[i], c.window,
                                 c.window // 2 if (c.shifted and j % 2) else 0,
                                 c.mlp_ratio, c.rel_pos_bias)
                for j in range(c.depths[i])
            ]
            self.stages.append(_Stage(blocks))
            self.out_norms.append(LayerNorm(dim))
            if i < 3:
                self.merges.append(PatchMerging(rng, dim))

    def forward(self, image: Tensor) -> FeaturePyramid:
        B, _, H, W = image.shape
        if H % 32 or W % 32:
            raise ContractError(f"input size {H}x{W} must be divisible by 32")
        h16, w16 = H // 16, W // 16
        ws = min(self.config.window, h16, w16)
        if h16 % ws or w16 % ws:
            raise ContractError(f"input size {H}x{W}: deepest stage {h16}x{w16} does not tile into {ws}x{ws} windows")
        x = self.patch_embed(image)
        h, w = x.shape[2:]
        z = nchw_to_tokens(x)
        levels = []
        for i in range(4):
            for blk in self.stages[i].blocks:
                z = blk(z, h, w)
            levels.append(tokens_to_nchw(self.out_norms[i](z), h, w))
            if i < 3:
                z = self.merges[i].tokens(z, h, w)
                h, w = h // 2, w // 2
        return FeaturePyramid(*levels)


class _Stage(Module):
    def __init__(self, blocks: Sequence[TransformerBlock]):
        self.blocks = list(blocks)


def encode(encoder: SwinEncoder, image: Tensor) -> FeaturePyramid:
    return encoder(image)


def parameter_breakdown(encoder: SwinEncoder) -> dict[str, int]:
    out = {"patch_embed": encoder.patch_embed.num_parameters()}
    for i in range(4):
        n = encoder.stages[i].num_parameters() + encoder.out_norms[i].num_parameters()
        if i < 3:
            n += encoder.merges[i].num_parameters()
        out[f"stage{i + 1}"] = n
    return out


__all__ = [
    "EncoderConfig",
    "FeaturePyramid",
    "PatchEmbed",
    "PatchMerging",
    "SwinEncoder",
    "TransformerBlock",
    "WindowAttention",
    "block_pair",
    "depth_to_space",
    "encode",
    "nchw_to_tokens",
    "parameter_breakdown",
    "relative_position_index",
    "shift_mask",
    "space_to_depth",
    "tokens_to_nchw",
]
