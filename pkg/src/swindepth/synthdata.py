"""Deterministic synthetic monocular sequences with exact depth, pose and intrinsics.

The default scene is a textured corridor: a ground plane, two side walls, an
end wall and a few fronto-parallel rectangles, seen by a camera that drives
forward with a gentle lateral sway and yaw.  Textures are sums of low
frequency sinusoids evaluated analytically and averaged over a supersampled
pixel footprint, so images are smooth enough for bilinear warping to
reproduce them.

Camera convention: x right, y down, z forward.  Poses are camera-to-world.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(RuntimeError):
    """Invalid scene, degenerate geometry, or a malformed dataset on disk."""


@dataclass(frozen=True)
class Texture:
    base: tuple[float, float, float]
    freqs: np.ndarray          # (k, 2) cycles per scene unit
    phases: np.ndarray         # (k,)
    weights: np.ndarray        # (k, 3) per-channel amplitudes

    @classmethod
    def random(cls, rng: np.random.Generator, n: int = 6, f_lo: float = 0.12, f_hi: float = 0.5,
               amplitude: float = 0.3) -> "Texture":
        angle = rng.uniform(0, np.pi, n)
        mag = rng.uniform(f_lo, f_hi, n)
        freqs = np.stack([np.cos(angle), np.sin(angle)], axis=1) * mag[:, None]
        weights = rng.uniform(0.3, 1.0, (n, 3)) * rng.choice([-1.0, 1.0], (n, 1)) * (amplitude / np.sqrt(n))
        base = tuple(float(b) for b in rng.uniform(0.3, 0.7, 3))
        return cls(base, freqs, rng.uniform(0, 2 * np.pi, n), weights)

    def __call__(self, uv: np.ndarray) -> np.ndarray:
        """(..., 2) surface coordinates to (..., 3) colors."""
        arg = 2 * np.pi * (uv @ self.freqs.T) + self.phases
        return np.asarray(self.base) + np.sin(arg) @ self.weights


_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Surface:
    """Axis-aligned plane ``coord[axis] == offset`` limited to ``bounds`` on the other two axes."""

    axis: str
    offset: float
    texture: Texture
    bounds: Optional[tuple[tuple[float, float], tuple[float, float]]] = None
    name: str = ""

    def other_axes(self) -> tuple[int, int]:
        a = _AXES[self.axis]
        return tuple(i for i in range(3) if i != a)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int
    width: int
    fx: float
    fy: float
    cx: float
    cy: float
    surfaces: tuple[Surface, ...]
    poses: np.ndarray = field(repr=False)          # (frames, 4, 4) camera-to-world
    supersample: int = 3
    depth_range: tuple[float, float] = (2.0, 50.0)

    @property
    def frames(self) -> int:
        return len(self.poses)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass
class SyntheticSequence:
    frames: np.ndarray          # (N, 3, H, W) float32 in [0, 1]
    depth: np.ndarray           # (N, H, W) float32
    poses: np.ndarray           # (N, 4, 4) float64 camera-to-world
    intrinsics: np.ndarray      # (4,) fx fy cx cy
    labels: Optional[np.ndarray] = None   # (N, H, W) surface index hit by the pixel center

    def __len__(self) -> int:
        return len(self.frames)

    def relative_pose(self, target: int, source: int) -> np.ndarray:
        """Transform mapping target-camera points into the source camera."""
        return np.linalg.inv(self.poses[source]) @ self.poses[target]



def kitti_like_intrinsics(height: int, width: int) -> tuple[float, float, float, float]:
    """KITTI's normalized intrinsics scaled to the image, pixel centers at integers."""
    return 0.58 * width, 1.92 * height, 0.5 * width - 0.5, 0.5 * height - 0.5


def yaw_pose(x: float, y: float, z: float, yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    P = np.eye(4)
    P[:3, :3] = [[c, 0, s], [0, 1, 0], [-s, 0, c]]
    P[:3, 3] = [x, y, z]
    return P


def driving_trajectory(frames: int, step: float = 0.1, sway: float = 0.3, yaw: float = 0.02,
                       period: float = 60.0, phase: float = 0.0) -> np.ndarray:
    t = np.arange(frames)
    w = 2 * np.pi * t / period + phase
    return np.stack([yaw_pose(sway * np.sin(w), 0.0, step * ti, yaw * np.cos(w)) for ti, w in zip(t, w)])


def corridor_scene(seed: int = 0, height: int = 64, width: int = 192, frames: int = 200,
                   step: float = 0.1, n_rects: int = 6, depth_range: tuple[float, float] = (2.0, 50.0),
                   supersample: int = 3) -> SceneSpec:
    """Ground, side walls, end wall and rectangles placed so every depth stays in ``depth_range``."""
    lo, hi = depth_range
    if not (0.1 < lo < hi < 100.0):
        raise DataError(f"depth range {depth_range} must satisfy 0.1 < near < far < 100")
    if frames < 1:
        raise DataError("need at least one frame")
    travel = step * (frames - 1)
    end_z = hi - 1.0
    rect_near = travel + lo + 0.5
    rect_far = end_z - 3.0
    if rect_near >= rect_far:
        raise DataError(f"trajectory of length {travel:.2f} does not fit depth range {depth_range}")
    rng = np.random.default_rng(seed)
    surfaces = [
        Surface("y", 1.5, Texture.random(rng), name="ground"),
        Surface("x", -5.0, Texture.random(rng), name="left"),
        Surface("x", 5.0, Texture.random(rng), name="right"),
        Surface("z", end_z, Texture.random(rng), name="end"),
        Surface("y", -3.5, Texture.random(rng), name="ceiling"),
    ]
    for i in range(n_rects):
        z = rng.uniform(rect_near, rect_far)
        w = rng.uniform(1.0, 3.0)
        h = rng.uniform(1.0, 3.0)
        x0 = rng.uniform(-4.5, 4.5 - w)
        y1 = rng.uniform(0.0, 1.5)
        surfaces.append(Surface("z", z, Texture.random(rng), ((x0, x0 + w), (y1 - h, y1)), name=f"rect{i}"))
    fx, fy, cx, cy = kitti_like_intrinsics(height, width)
    poses = driving_trajectory(frames, step, phase=rng.uniform(0, 2 * np.pi))
    return SceneSpec(seed, height, width, fx, fy, cx, cy, tuple(surfaces), poses, supersample, depth_range)


def plane_scene(z: float = 5.0, height: int = 32, width: int = 96, frames: int = 2, seed: int = 0,
                poses: Optional[np.ndarray] = None, supersample: int = 3) -> SceneSpec:
    """A single unbounded fronto-parallel textured plane."""
    rng = np.random.default_rng(seed)
    fx, fy, cx, cy = kitti_like_intrinsics(height, width)
    if poses is None:
        poses = np.stack([np.eye(4)] * frames)
    return SceneSpec(seed, height, width, fx, fy, cx, cy, (Surface("z", z, Texture.random(rng), name="plane"),),
                     np.asarray(poses, dtype=np.float64), supersample, (0.1, 100.0))


def _intersect(surfaces: Sequence[Surface], origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit along rays ``origin + t * dirs`` (dirs (..., 3), t is camera depth)."""
    best_t = np.full(dirs.shape[:-1], np.inf)
    best_id = np.full(dirs.shape[:-1], -1)
    for idx, s in enumerate(surfaces):
        a = _AXES[s.axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (s.offset - origin[a]) / dirs[..., a]
        ok = np.isfinite(t) & (t > 1e-9)
        if s.bounds is not None:
            p = origin + t[..., None] * dirs
            (i, j), ((ilo, ihi), (jlo, jhi)) = s.other_axes(), s.bounds
            ok &= (p[..., i] >= ilo) & (p[..., i] <= ihi) & (p[..., j] >= jlo) & (p[..., j] <= jhi)
        closer = ok & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, idx, best_id)
    return best_t, best_id


def _shade(surfaces: Sequence[Surface], origin: np.ndarray, dirs: np.ndarray, t: np.ndarray,
           ids: np.ndarray) -> np.ndarray:
    out = np.zeros(dirs.shape[:-1] + (3,))
    points = origin + t[..., None] * dirs
    for idx, s in enumerate(surfaces):
        hit = ids == idx
        if hit.any():
            out[hit] = s.texture(points[hit][:, list(s.other_axes())])
    return out


def _check_trajectory(spec: SceneSpec) -> None:
    c = spec.poses[:, :3, 3]
    for s in spec.surfaces:
        a = _AXES[s.axis]
        side = np.sign(c[:, a] - s.offset)
        if np.any(side == 0):
            raise DataError(f"camera lies on surface {s.name or s.axis}")
        crossed = np.nonzero(side[1:] != side[:-1])[0]
        for k in crossed:
            if s.bounds is None:
                raise DataError(f"camera passes through surface {s.name or s.axis} between frames {k} and {k + 1}")
            i, j = s.other_axes()
            (ilo, ihi), (jlo, jhi) = s.bounds
            f = (s.offset - c[k, a]) / (c[k + 1, a] - c[k, a])
            p = c[k] + f * (c[k + 1] - c[k])
            if ilo <= p[i] <= ihi and jlo <= p[j] <= jhi:
                raise DataError(f"camera passes through {s.name} between frames {k} and {k + 1}")


def render_frame(spec: SceneSpec, pose: np.ndarray):
    """(3, H, W) image, (H, W) depth and (H, W) surface labels for one camera pose."""
    H, W, n = spec.height, spec.width, spec.supersample
    K_inv = np.linalg.inv(np.array([[spec.fx, 0, spec.cx], [0, spec.fy, spec.cy], [0, 0, 1.0]]))
    R, origin = pose[:3, :3], pose[:3, 3]

    def rays(v, u):
        pix = np.stack([u, v, np.ones_like(u)], axis=-1)
        return pix @ K_inv.T @ R.T      # camera rays with unit z, rotated to world

    v, u = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    depth, labels = _intersect(spec.surfaces, origin, rays(v, u))
    if np.any(labels < 0):
        raise DataError("some pixels see no surface")

    offs = (np.arange(n) + 0.5) / n - 0.5
    acc = np.zeros((H, W, 3))
    for dv in offs:
        for du in offs:
            d = rays(v + dv, u + du)
            t, ids = _intersect(spec.surfaces, origin, d)
            acc += _shade(spec.surfaces, origin, d, t, ids)
    image = np.clip(acc / n ** 2, 0.0, 1.0).transpose(2, 0, 1)
    return image.astype(np.float32), depth.astype(np.float32), labels


def render_sequence(spec: SceneSpec) -> SyntheticSequence:
    """Render every frame of ``spec``; identical specs give bitwise-identical output."""
    if spec.height % 2 or spec.width % 2:
        raise DataError("image sides must be even")
    _check_trajectory(spec)
    frames, depths, labels = zip(*(render_frame(spec, P) for P in spec.poses))
    depth = np.stack(depths)
    lo, hi = spec.depth_range
    if depth.min() <= lo * 0.999 or depth.max() >= hi * 1.001:
        raise DataError(f"rendered depth [{depth.min():.3f}, {depth.max():.3f}] leaves range {spec.depth_range}")
    return SyntheticSequence(np.stack(frames), depth, spec.poses.copy(), spec.intrinsics, np.stack(labels))


def visibility_mask(depth_t: np.ndarray, depth_s: np.ndarray, T: np.ndarray, K: np.ndarray,
                    border: int = 2, rel_tol: float = 0.02) -> np.ndarray:
    """Target pixels whose surface point is visible in the source frame away from its border.

    ``T`` maps target-camera points into the source camera.
    """
    H, W = depth_t.shape
    v, u = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    pts = np.stack([u, v, np.ones_like(u)], axis=-1) @ np.linalg.inv(K).T * depth_t[..., None]
    src = pts @ T[:3, :3].T + T[:3, 3]
    proj = src @ K.T
    z = proj[..., 2]
    us, vs = proj[..., 0] / z, proj[..., 1] / z
    inside = (z > 0) & (us >= border) & (us <= W - 1 - border) & (vs >= border) & (vs <= H - 1 - border)
    inside &= (u >= border) & (u <= W - 1 - border) & (v >= border) & (v <= H - 1 - border)
    # the source depth interpolated where the point lands must agree with the point's depth;
    # across an occlusion edge the interpolated depth mixes two surfaces and fails
    x0 = np.clip(np.floor(us), 0, W - 2).astype(int)
    y0 = np.clip(np.floor(vs), 0, H - 2).astype(int)
    fx_, fy_ = np.clip(us - x0, 0, 1), np.clip(vs - y0, 0, 1)
    interp = ((1 - fy_) * ((1 - fx_) * depth_s[y0, x0] + fx_ * depth_s[y0, x0 + 1])
              + fy_ * ((1 - fx_) * depth_s[y0 + 1, x0] + fx_ * depth_s[y0 + 1, x0 + 1]))
    ok = inside & (np.abs(interp - z) <= rel_tol * z)
    return ok


# -- on-disk format ---------------------------------------------------------

def write_ppm(path: os.PathLike, image: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] to binary P6, rounding to 8 bits."""
    data = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    H, W, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_header(f, n_fields: int, path) -> list[bytes]:
    fields: list[bytes] = []
    while len(fields) < n_fields:
        line = f.readline()
        if not line:
            raise DataError(f"{path}: truncated header")
        fields.extend(line.split(b"#")[0].split())
    return fields


def read_ppm(path: os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_header(f, 4, path)
        if magic != b"P6" or int(maxval) != 255:
            raise DataError(f"{path}: not an 8-bit binary PPM")
        W, H = int(w), int(h)
        raw = f.read(W * H * 3)
    if len(raw) != W * H * 3:
        raise DataError(f"{path}: truncated pixel data")
    return (np.frombuffer(raw, np.uint8).reshape(H, W, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_pfm(path: os.PathLike, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom to top."""
    d = np.asarray(depth, dtype="<f4")
    H, W = d.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path: os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, scale = _read_header(f, 4, path)
        if magic != b"Pf":
            raise DataError(f"{path}: not a single-channel PFM")
        W, H, scale = int(w), int(h), float(scale)
        raw = f.read(W * H * 4)
    if len(raw) != W * H * 4:
        raise DataError(f"{path}: truncated float data")
    return np.frombuffer(raw, "<f4" if scale < 0 else ">f4").reshape(H, W)[::-1].astype(np.float32)


def write_dataset(seq: SyntheticSequence, root: os.PathLike, scene_id: str = "0000") -> Path:
    """Write one scene under ``root`` and (re)write the manifest.  Returns the scene directory."""
    root = Path(root)
    scene = root / f"scene_{scene_id}"
    try:
        scene.mkdir(parents=True, exist_ok=True)
        for i in range(len(seq)):
            write_ppm(scene / f"frame_{i:06d}.ppm", seq.frames[i])
            write_pfm(scene / f"depth_{i:06d}.pfm", seq.depth[i])
        with open(scene / "poses.txt", "w") as f:
            for P in seq.poses:
                f.write(" ".join(repr(float(x)) for x in P[:3].ravel()) + "\n")
        with open(scene / "intrinsics.txt", "w") as f:
            f.write(" ".join(repr(float(x)) for x in seq.intrinsics) + "\n")
        entries = dict(read_manifest(root)) if (root / "manifest.txt").exists() else {}
        entries[scene_id] = len(seq)
        with open(root / "manifest.txt", "w") as f:
            for sid in sorted(entries):
                f.write(f"{sid} {entries[sid]}\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset at {exc.filename or scene}: {exc.strerror}") from exc
    return scene


def read_manifest(root: os.PathLike) -> list[tuple[str, int]]:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or not re.fullmatch(r"\d+", parts[1]):
            raise DataError(f"{path}:{n}: expected '<scene id> <frame count>'")
        out.append((parts[0], int(parts[1])))
    return out


def read_scene(root: os.PathLike, scene_id: str, count: Optional[int] = None, depth: bool = True) -> SyntheticSequence:
    scene = Path(root) / f"scene_{scene_id}"
    if count is None:
        count = dict(read_manifest(root))[scene_id]

    def need(p: Path) -> Path:
        if not p.exists():
            raise DataError(f"missing file {p}")
        return p

    frames = np.stack([read_ppm(need(scene / f"frame_{i:06d}.ppm")) for i in range(count)])
    depths = (np.stack([read_pfm(need(scene / f"depth_{i:06d}.pfm")) for i in range(count)])
              if depth else np.zeros((count,) + frames.shape[2:], np.float32))
    rows = np.loadtxt(need(scene / "poses.txt"), ndmin=2)
    if rows.shape != (count, 12):
        raise DataError(f"{scene / 'poses.txt'}: expected {count} rows of 12 numbers, got {rows.shape}")
    poses = np.tile(np.eye(4), (count, 1, 1))
    poses[:, :3] = rows.reshape(count, 3, 4)
    intr = np.loadtxt(need(scene / "intrinsics.txt")).reshape(-1)
    if intr.shape != (4,):
        raise DataError(f"{scene / 'intrinsics.txt'}: expected fx fy cx cy")
    return SyntheticSequence(frames, depths, poses, intr)


def read_dataset(root: os.PathLike, depth: bool = True) -> dict[str, SyntheticSequence]:
    return {sid: read_scene(root, sid, n, depth) for sid, n in read_manifest(root)}


def synthesize(root: os.PathLike, seed: int = 0, frames: int = 200, height: int = 64, width: int = 192,
               scenes: int = 1, **kw) -> list[Path]:
    """Render and write ``scenes`` corridor scenes with seeds ``seed, seed+1, ...``."""
    out = []
    for k in range(scenes):
        spec = corridor_scene(seed + k, height, width, frames, **kw)
        out.append(write_dataset(render_sequence(spec), root, f"{k:04d}"))
    return out


__all__ = [
    "DataError", "SceneSpec", "Surface", "Texture", "SyntheticSequence", "corridor_scene", "plane_scene",
    "render_frame", "render_sequence", "visibility_mask", "write_dataset", "read_dataset", "read_scene",
    "read_manifest", "read_ppm", "write_ppm", "read_pfm", "write_pfm", "synthesize", "driving_trajectory",
    "kitti_like_intrinsics", "yaw_pose"
]
