"""Point clouds and the observation processing chain.

The per-step chain (in order): backprojected frames are accumulated in a
KeyframeBuffer, integrated into the current base frame with ground-truth
poses, cropped to a square around the robot, voxel-downsampled to a spatially
uniform set, then randomly downsampled to a fixed point budget.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geom import (ContractViolationError, FrameMismatchError, Pose, compose,
                   inverse)


class DegenerateGeometryError(ValueError):
    """Too little geometric structure to solve the registration."""


@dataclass(frozen=True)
class PointCloud:
    """Points (N, 3) in meters, tagged with the frame they are expressed in.

    ``empty_source`` marks clouds fabricated from an empty input by
    random_downsample's padding rule, so consumers can tell real geometry
    from placeholder origins.
    """

    points: np.ndarray
    frame: str = "base"
    empty_source: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.size and not np.isfinite(pts).all():
            raise ContractViolationError("point cloud contains non-finite values")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def transform_points(pose: Pose, cloud: PointCloud) -> PointCloud:
    if cloud.frame != pose.from_frame:
        raise FrameMismatchError(
            f"cloud in {cloud.frame!r} cannot be moved by pose from {pose.from_frame!r}")
    return PointCloud(pose.apply(cloud.points), frame=pose.to_frame,
                      empty_source=cloud.empty_source)


@dataclass
class KeyframeBuffer:
    """Bounded FIFO of (cloud in its capture base frame, pose world<-base)."""

    capacity: int = 8
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractViolationError("capacity must be >= 1")
        self.entries = deque(self.entries, maxlen=self.capacity)

    def add(self, cloud: PointCloud, pose_world_base: Pose) -> None:
        if pose_world_base.to_frame != "world":
            raise FrameMismatchError("keyframe pose must map into the world frame")
        self.entries.append((cloud, pose_world_base))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


def integrate(buffer: KeyframeBuffer, current_pose: Pose) -> PointCloud:
    """Merge all keyframes into the current base frame.

    Each stored cloud is mapped through inverse(current_pose) o stored_pose;
    an empty buffer yields an empty cloud (frames with nothing seen yet are
    not an error).
    """
    if len(buffer) == 0:
        return PointCloud(np.empty((0, 3)), frame=current_pose.from_frame)
    world_to_cur = inverse(current_pose)
    parts = []
    for cloud, pose in buffer.entries:
        rel = compose(world_to_cur, pose)
        parts.append(rel.apply(cloud.points))
    return PointCloud(np.concatenate(parts, axis=0), frame=current_pose.from_frame)


def crop(cloud: PointCloud, half_extent: float) -> PointCloud:
    """Keep points with |x| <= half_extent and |y| <= half_extent (closed).

    z is unbounded; the region is a square column around the robot.
    """
    p = cloud.points
    keep = (np.abs(p[:, 0]) <= half_extent) & (np.abs(p[:, 1]) <= half_extent)
    return PointCloud(p[keep], frame=cloud.frame, empty_source=cloud.empty_source)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One representative input point per occupied voxel (never invents points).

    The representative is the input point nearest the voxel's point centroid,
    ties broken toward the lowest input index.
    """
    if voxel <= 0:
        raise ContractViolationError("voxel size must be positive")
    idx = kernels.voxel_reduce(cloud.points, voxel)
    return PointCloud(cloud.points[idx], frame=cloud.frame,
                      empty_source=cloud.empty_source)


def random_downsample(cloud: PointCloud, target: int, rng: np.random.Generator) -> PointCloud:
    """Exactly ``target`` points.

    n >= target: uniform sample without replacement; 0 < n < target: keep all
    and pad by sampling with replacement; n == 0: ``target`` origin points
    with the empty_source flag set.
    """
    if target <= 0:
        raise ContractViolationError("target must be positive")
    n = len(cloud)
    if n == 0:
        return PointCloud(np.zeros((target, 3)), frame=cloud.frame, empty_source=True)
    if n >= target:
        idx = rng.choice(n, size=target, replace=False)
    else:
        idx = np.concatenate([np.arange(n), rng.integers(0, n, size=target - n)])
    return PointCloud(cloud.points[idx], frame=cloud.frame,
                      empty_source=cloud.empty_source)


@dataclass(frozen=True)
class DownsampleConfig:
    crop_half_extent: float = 5.0
    voxel_size: float = 0.05
    target_points: int = 256

    def __post_init__(self):
        if min(self.crop_half_extent, self.voxel_size, self.target_points) <= 0:
            raise ContractViolationError("downsample parameters must be positive")


def downsample_chain(cloud: PointCloud, cfg: DownsampleConfig,
                     rng: np.random.Generator) -> PointCloud:
    """crop -> voxel -> random, per the declared ordering."""
    out = crop(cloud, cfg.crop_half_extent)
    out = voxel_downsample(out, cfg.voxel_size)
    return random_downsample(out, cfg.target_points, rng)


@dataclass(frozen=True)
class IcpReport:
    iterations: int
    rms_residual: float
    num_correspondences: int


def _kabsch(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation + translation mapping src onto dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    sv = np.linalg.svd(h, compute_uv=False)
    if sv[1] < 1e-12 * max(sv[0], 1.0):
        raise DegenerateGeometryError(
            "correspondences are collinear; rotation is not determined")
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = mu_d - r @ mu_s
    return r, t


def icp_register(source: PointCloud, target: PointCloud,
                 init: Pose | None = None, max_iter: int = 50,
                 tol: float = 1e-8, hash_cell: float = 0.25):
    """Iterative closest point: returns (Pose target<-source, IcpReport).

    Alternates spatial-hash nearest-neighbor correspondence with closed-form
    Kabsch alignment until the mean residual changes by less than ``tol``.
    Correspondences farther than 3x the current median distance are rejected
    (robustness against partial overlap).
    """
    if len(source) == 0 or len(target) == 0:
        raise ContractViolationError("ICP needs two nonempty clouds")
    if init is None:
        r = np.eye(3)
        t = np.zeros(3)
    else:
        r = init.rotation.copy()
        t = init.translation.copy()
    tgt = target.points
    prev_mean = np.inf
    rms = np.inf
    n_used = 0
    iterations = 0
    for iterations in range(1, max_iter + 1):
        moved = source.points @ r.T + t
        idx, d2 = kernels.nearest_neighbors(moved, tgt, hash_cell)
        dist = np.sqrt(d2)
        med = np.median(dist)
        keep = dist <= max(3.0 * med, 1e-12)
        if keep.sum() < 3:
            raise DegenerateGeometryError("fewer than 3 usable correspondences")
        src_k = moved[keep]
        dst_k = tgt[idx[keep]]
        n_used = int(keep.sum())
        r_step, t_step = _kabsch(src_k, dst_k)
        r = r_step @ r
        t = r_step @ t + t_step
        mean_res = float(dist[keep].mean())
        rms = float(np.sqrt(d2[keep].mean()))
        if mean_res < tol or abs(prev_mean - mean_res) < tol:
            break
        prev_mean = mean_res
    pose = Pose(_reortho(r), t, source.frame, target.frame)
    report = IcpReport(iterations=iterations, rms_residual=rms,
                       num_correspondences=n_used)
    return pose, report


def _reortho(r: np.ndarray) -> np.ndarray:
    from .geom import orthonormalize

    if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
        return orthonormalize(r)
    return r


def write_cloud(path, cloud: PointCloud) -> None:
    """Debug dump: ``# frame: <name>`` header then one ``x y z`` per line."""
    with open(path, "w", encoding="ascii") as f:
        f.write(f"# frame: {cloud.frame}\n")
        for x, y, z in cloud.points:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_cloud(path) -> PointCloud:
    frame = "base"
    rows = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "frame:" in line:
                    frame = line.split("frame:", 1)[1].strip()
                continue
            toks = line.split()
            if len(toks) != 3:
                raise ValueError(
                    f"{path}: line {lineno}: expected 3 coordinates, "
                    f"got {len(toks)}")
            try:
                rows.append([float(tok) for tok in toks])
            except ValueError:
                raise ValueError(
                    f"{path}: line {lineno}: not a number: {line!r}") from None
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return PointCloud(pts, frame=frame)
