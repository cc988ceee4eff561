"""Relative camera motion from a pair of frames, and its SE(3) realization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import ContractError, Tensor, ops
from .numerics.nn import Conv2d, Module, activation

IMAGE_MEAN = 0.45
IMAGE_STD = 0.225


@dataclass(frozen=True)
class PoseConfig:
    arch: str = "basic"
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    activation: str = "relu"
    output_scale: float = 0.01

    def __post_init__(self):
        if self.arch not in ("basic", "resnet18"):
            raise ContractError(f"unknown pose architecture {self.arch!r}")
        activation(self.activation)


class _BasicBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int, stride: int, act):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride=stride)
        self.conv2 = Conv2d(rng, c_out, c_out, 3)
        self.down = Conv2d(rng, c_in, c_out, 1, stride=stride) if (stride != 1 or c_in != c_out) else None
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        skip = x if self.down is None else self.down(x)
        return self.act(self.conv2(self.act(self.conv1(x))) + skip)


class PoseNet(Module):
    """Convolutional encoder over the 6-channel frame pair, global pooling, 6 outputs.

    ``arch="basic"`` stacks stride-2 3x3 convolutions of the configured widths;
    ``arch="resnet18"`` uses ResNet-18 stage widths and block counts (3x3 stem,
    no normalization layers).
    """

    def __init__(self, rng: np.random.Generator, config: PoseConfig = PoseConfig()):
        self.config = config
        self.act = activation(config.activation)
        if config.arch == "basic":
            chans = (6,) + tuple(config.widths)
            self.layers = [Conv2d(rng, a, b, 3, stride=2) for a, b in zip(chans, chans[1:])]
            last = chans[-1]
        else:
            self.layers = [Conv2d(rng, 6, 64, 3, stride=2)]
            c = 64
            for width, stride in zip((64, 128, 256, 512), (2, 2, 2, 2)):
                self.layers.append(_BasicBlock(rng, c, width, stride, self.act))
                self.layers.append(_BasicBlock(rng, width, width, 1, self.act))
                c = width
            last = c
        self.head = Conv2d(rng, last, 6, 1)

    def forward(self, frame_a: Tensor, frame_b: Tensor) -> Tensor:
        if frame_a.shape != frame_b.shape:
            raise ContractError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
        x = (ops.concat([frame_a, frame_b], axis=1) - IMAGE_MEAN) / IMAGE_STD
        for layer in self.layers:
            x = layer(x) if isinstance(layer, _BasicBlock) else self.act(layer(x))
        return self.head(x).mean(axis=(2, 3)) * self.config.output_scale


def predict_pose(net: PoseNet, frame_a: Tensor, frame_b: Tensor) -> Tensor:
    """(B, 6) vectors: axis-angle then translation."""
    return net(frame_a, frame_b)


_SMALL_ANGLE_SQ = 1e-12  # theta < 1e-6


def rodrigues(axis_angle: Tensor) -> Tensor:
    """(B, 3) axis-angle vectors to (B, 3, 3) rotation matrices.

    ``R = I + A [a]x + B [a]x^2`` with ``A = sin(t)/t`` and ``B = (1 - cos t)/t^2``;
    both use their second-order Taylor expansions when ``t < 1e-6``.
    """
    if axis_angle.ndim != 2 or axis_angle.shape[1] != 3:
        raise ContractError(f"axis-angle must be (B, 3), got {axis_angle.shape}")
    B = axis_angle.shape[0]
    ax, ay, az = (axis_angle[:, i] for i in range(3))
    theta_sq = ax * ax + ay * ay + az * az
    small = theta_sq.data < _SMALL_ANGLE_SQ
    safe_sq = ops.where(small, np.ones(B, dtype=axis_angle.dtype), theta_sq)
    theta = ops.sqrt(safe_sq)
    coef_a = ops.where(small, 1.0 - theta_sq / 6.0, ops.sin(theta) / theta)
    coef_b = ops.where(small, 0.5 - theta_sq / 24.0, (1.0 - ops.cos(theta)) / safe_sq)

    zero = Tensor(np.zeros(B, dtype=axis_angle.dtype))
    skew = ops.stack([
        ops.stack([zero, -az, ay], axis=1),
        ops.stack([az, zero, -ax], axis=1),
        ops.stack([-ay, ax, zero], axis=1),
    ], axis=1)
    eye = np.eye(3, dtype=axis_angle.dtype)
    return (eye + coef_a.reshape(B, 1, 1) * skew
            + coef_b.reshape(B, 1, 1) * (skew @ skew))


def se3(pose: Tensor, invert: bool = False) -> Tensor:
    """(B, 6) pose vectors to (B, 4, 4) rigid transforms ``[R | t]``.

    ``invert=True`` returns ``[R^T | -R^T t]``.
    """
    if pose.ndim != 2 or pose.shape[1] != 6:
        raise ContractError(f"pose must be (B, 6), got {pose.shape}")
    B = pose.shape[0]
    rot = rodrigues(pose[:, :3])
    t = pose[:, 3:].reshape(B, 3, 1)
    if invert:
        rot = ops.transpose(rot, (0, 2, 1))
        t = -(rot @ t)
    top = ops.concat([rot, t], axis=2)
    bottom = Tensor(np.broadcast_to(np.array([0.0, 0.0, 0.0, 1.0], dtype=pose.dtype), (B, 1, 4)))
    return ops.concat([top, bottom], axis=1)


def pose_to_matrix_np(pose: Sequence[float], invert: bool = False) -> np.ndarray:
    """Single pose vector to a 4x4 float64 array (no gradient)."""
    from .numerics import default_dtype

    with default_dtype(np.float64):
        return se3(Tensor(np.asarray(pose, dtype=np.float64).reshape(1, 6)), invert).data[0]
