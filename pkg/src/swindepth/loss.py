"""Self-supervised photometric training objective.

View synthesis warps each temporally adjacent source frame into the target
view using predicted depth and relative pose.  The per-pixel error mixes SSIM
and L1, takes the minimum over sources, and auto-masks pixels whose
un-warped error is already lower.  An edge-aware smoothness term regularizes
the mean-normalized disparity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .decoder import DepthPyramid
from .numerics import ContractError, Tensor, no_grad, ops


class NumericError(RuntimeError):
    """A loss component became non-finite.  ``payload`` names the offending terms."""

    def __init__(self, message: str, payload: Mapping[str, float]):
        super().__init__(f"{message}: {dict(payload)}")
        self.payload = dict(payload)


@dataclass(frozen=True)
class LossConfig:
    ssim_weight: float = 0.85
    smooth_weight: float = 1e-3
    min_depth: float = 0.1
    max_depth: float = 100.0
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    automask: bool = True
    automask_noise: float = 1e-5
    full_res: bool = False
    z_eps: float = 1e-3


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels; pixel centers sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")

    def scaled(self, level: int) -> "Intrinsics":
        """Intrinsics of an image downsampled by ``2**level`` with half-pixel alignment."""
        f = 2.0 ** level
        return Intrinsics(self.fx / f, self.fy / f, (self.cx + 0.5) / f - 0.5, (self.cy + 0.5) / f - 0.5)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


def intrinsics_matrices(intrinsics: np.ndarray, level: int = 0) -> np.ndarray:
    """(B, 4) rows of (fx, fy, cx, cy) to (B, 3, 3) matrices at pyramid ``level``."""
    rows = np.atleast_2d(np.asarray(intrinsics, dtype=np.float64))
    return np.stack([Intrinsics(*r).scaled(level).matrix() for r in rows])


@dataclass
class TrainBatch:
    """Target frame, its neighbours keyed by frame offset (-1, +1), and (B, 4) intrinsics."""

    target: Tensor
    sources: dict[int, Tensor]
    intrinsics: np.ndarray
    gt_depth: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        for k, src in self.sources.items():
            if src.shape != self.target.shape:
                raise ContractError(f"source {k} shape {src.shape} differs from target {self.target.shape}")


def disp_to_depth(disp, min_depth: float = 0.1, max_depth: float = 100.0):
    """Sigmoid disparity in (0, 1) to depth in (min_depth, max_depth)."""
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    scaled = lo + (hi - lo) * disp
    return 1.0 / scaled


def pixel_grid(h: int, w: int) -> np.ndarray:
    """(3, h*w) homogeneous pixel coordinates (u = column, v = row)."""
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([u.ravel(), v.ravel(), np.ones(h * w)])


def synthesize_view(source: Tensor, depth: Tensor, transform: Tensor, K: np.ndarray,
                    z_eps: float = 1e-3) -> Tensor:
    """Warp ``source`` into the target view.

    ``depth`` is the target-view depth (B, 1, h, w); ``transform`` (B, 4, 4) maps
    target-camera points into the source camera; ``K`` is (B, 3, 3) or (3, 3)
    at this resolution.
    """
    B, _, h, w = source.shape
    if depth.shape != (B, 1, h, w):
        raise ContractError(f"depth shape {depth.shape} does not match source {source.shape}")
    dtype = source.dtype
    K = np.broadcast_to(np.asarray(K, dtype=np.float64), (B, 3, 3))
    rays = (np.linalg.inv(K) @ pixel_grid(h, w)).astype(dtype)          # (B, 3, hw)
    cam = depth.reshape(B, 1, h * w) * rays
    rot = transform[:, :3, :3]
    trans = transform[:, :3, 3:4]
    proj = Tensor(K.astype(dtype)) @ (rot @ cam + trans)
    z = ops.clamp(proj[:, 2], lo=z_eps)
    u = proj[:, 0] / z
    v = proj[:, 1] / z
    grid = ops.stack([(2.0 * u + 1.0) / w - 1.0, (2.0 * v + 1.0) / h - 1.0], axis=-1)
    return ops.grid_sample(source, grid.reshape(B, h, w, 2))


def _box3(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return ops.separable(x, ops.box3_reflect_matrix(h), ops.box3_reflect_matrix(w))


def ssim(a: Tensor, b: Tensor, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> Tensor:
    """Per-pixel structural similarity from 3x3 reflection-padded local statistics."""
    mu_a, mu_b = _box3(a), _box3(b)
    var_a = _box3(a * a) - mu_a * mu_a
    var_b = _box3(b * b) - mu_b * mu_b
    cov = _box3(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def photometric_error(pred: Tensor, target: Tensor, alpha: float = 0.85,
                      c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> Tensor:
    """(B, 1, h, w) map of ``alpha (1 - SSIM)/2 + (1 - alpha) L1``, channel-averaged."""
    if pred.shape != target.shape:
        raise ContractError(f"shapes differ: {pred.shape} vs {target.shape}")
    l1 = ops.abs(pred - target).mean(axis=1, keepdims=True)
    if alpha == 0.0:
        return l1
    dssim = ops.clamp((1.0 - ssim(pred, target, c1, c2)) * 0.5, 0.0, 1.0).mean(axis=1, keepdims=True)
    return alpha * dssim + (1.0 - alpha) * l1


def min_reproj_automask(pe_warped: Sequence[Tensor], pe_identity: Optional[Sequence[Tensor]],
                        tie_noise: Optional[np.ndarray] = None):
    """Per-pixel minimum over sources, masked where un-warped sources already do better.

    Returns ``(loss_map, mask)``.  Where the mask is off the map holds the
    identity error, a constant, so only masked-in pixels carry gradient.
    ``tie_noise`` is added to the identity errors for the mask decision only.
    ``mask`` is a constant array (no gradient).
    """
    best = pe_warped[0]
    for pe in pe_warped[1:]:
        best = ops.minimum(best, pe)
    if pe_identity is None:
        return best, np.ones(best.shape, dtype=bool)
    best_id = pe_identity[0].data
    for pe in pe_identity[1:]:
        best_id = np.minimum(best_id, pe.data)
    mask = best.data < (best_id if tie_noise is None else best_id + tie_noise)
    return best * mask.astype(best.dtype) + np.where(mask, 0.0, best_id).astype(best.dtype), mask


def smoothness(disp: Tensor, image: Tensor) -> Tensor:
    """Edge-aware first-order smoothness of the mean-normalized disparity.

    Each direction is averaged over its valid forward-difference positions;
    a direction with no positions contributes zero.
    """
    if disp.shape[-2:] != image.shape[-2:]:
        raise ContractError(f"disparity {disp.shape} and image {image.shape} sizes differ")
    norm = disp / (disp.mean(axis=(2, 3), keepdims=True) + 1e-7)
    total = None
    h, w = disp.shape[-2:]
    for axis, n in ((3, w), (2, h)):
        if n < 2:
            continue
        lo = (slice(None), slice(None)) + ((slice(None), slice(0, -1)) if axis == 3 else (slice(0, -1),))
        hi = (slice(None), slice(None)) + ((slice(None), slice(1, None)) if axis == 3 else (slice(1, None),))
        d_grad = ops.abs(norm[lo] - norm[hi])
        i_grad = np.abs(image.data[lo] - image.data[hi]).mean(axis=1, keepdims=True)
        term = (d_grad * np.exp(-i_grad)).mean()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=disp.dtype))
    return total


def total_loss(batch: TrainBatch, disps: DepthPyramid, transforms: Mapping[int, Tensor],
               config: LossConfig = LossConfig(), rng: Optional[np.random.Generator] = None,
               return_terms: bool = False):
    """Mean over the four scales of masked min-reprojection + scaled smoothness.

    ``transforms[k]`` maps target-camera points into source frame ``k``.
    """
    target = batch.target
    B, _, H, W = target.shape
    bad_inputs = {f"disp/{level}": float("nan") for level in range(len(disps))
                  if not np.all(np.isfinite(disps.at_scale(level).data))}
    bad_inputs.update({f"transform/{k}": float("nan") for k, T in transforms.items() if not np.all(np.isfinite(T.data))})
    if bad_inputs:
        raise NumericError("non-finite network output", bad_inputs)
    per_scale = []
    terms: dict[str, float] = {}
    for level in range(len(disps)):
        disp = disps.at_scale(level)
        h, w = disp.shape[-2:]
        if config.full_res:
            disp_ref = ops.clamp(ops.bilinear_resize(disp, H, W, edge="clamp"), 1e-6, 1.0 - 1e-6)
            tgt, srcs, K = target, batch.sources, intrinsics_matrices(batch.intrinsics, 0)
        else:
            disp_ref = disp
            tgt = ops.bilinear_resize(target, h, w)
            srcs = {k: ops.bilinear_resize(s, h, w) for k, s in batch.sources.items()}
            K = intrinsics_matrices(batch.intrinsics, level)
        depth = disp_to_depth(disp_ref, config.min_depth, config.max_depth)

        pe_warped, pe_identity = [], []
        for k in sorted(srcs):
            warped = synthesize_view(srcs[k], depth, transforms[k], K, config.z_eps)
            pe_warped.append(photometric_error(warped, tgt, config.ssim_weight, config.ssim_c1, config.ssim_c2))
            if config.automask:
                with no_grad():
                    pe_identity.append(photometric_error(srcs[k], tgt, config.ssim_weight,
                                                         config.ssim_c1, config.ssim_c2))
        noise = None
        if config.automask and config.automask_noise and rng is not None:
            noise = rng.standard_normal(pe_warped[0].shape) * config.automask_noise
        loss_map, mask = min_reproj_automask(pe_warped, pe_identity if config.automask else None, noise)
        reproj = loss_map.mean()
        smooth = smoothness(disp, ops.bilinear_resize(target, h, w))
        scale_loss = reproj + (config.smooth_weight / 2 ** level) * smooth
        per_scale.append(scale_loss)
        terms[f"reproj/{level}"] = reproj.item()
        terms[f"smooth/{level}"] = smooth.item()
        terms[f"mask/{level}"] = float(mask.mean())

    total = per_scale[0]
    for s in per_scale[1:]:
        total = total + s
    total = total * (1.0 / len(per_scale))
    terms["total"] = total.item()
    bad = {k: v for k, v in terms.items() if not np.isfinite(v)}
    if bad:
        raise NumericError("non-finite loss", bad)
    if return_terms:
        return total, terms
    return total
