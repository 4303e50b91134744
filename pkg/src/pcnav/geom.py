"""Rigid-body transforms and pinhole depth-camera geometry.

Coordinate conventions (fixed once, everything else derives from them):

* camera frame: x right, y down, z forward (optical axis).  A pixel (u, v)
  with depth d backprojects to ((u-cx)*d/fx, (v-cy)*d/fy, d); u indexes
  columns, v indexes rows, both 0-based.
* base frame: x forward, y left, z up, origin on the floor under the robot
  center.  A level, forward-looking camera therefore has the extrinsic
  rotation with columns cam_x -> (0,-1,0), cam_y -> (0,0,-1), cam_z -> (1,0,0).
* world frame: x east, y north, z up; the floor is z = 0.

Poses map coordinates of a point expressed in ``from_frame`` into
``to_frame``:  p_to = R @ p_from + t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class FrameMismatchError(ValueError):
    """Operation applied across incompatible reference frames."""


class ContractViolationError(ValueError):
    """Input violates a documented precondition."""


def _check_rotation(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ContractViolationError(f"rotation must be 3x3, got {r.shape}")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
        raise ContractViolationError("rotation is not orthonormal with det +1")
    return r


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


@dataclass(frozen=True)
class Pose:
    """SE(3) rigid transform between two named frames."""

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str
    to_frame: str

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity(frame: str = "base", to_frame: str | None = None) -> "Pose":
        return Pose(np.eye(3), np.zeros(3), frame, to_frame or frame)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def compose(a: Pose, b: Pose) -> Pose:
    """Pose mapping b.from_frame -> a.to_frame (apply b first, then a)."""
    if a.from_frame != b.to_frame:
        raise FrameMismatchError(
            f"cannot compose: outer expects {a.from_frame!r}, inner produces {b.to_frame!r}")
    r = a.rotation @ b.rotation
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
        r = orthonormalize(r)
    t = a.rotation @ b.translation + a.translation
    return Pose(r, t, b.from_frame, a.to_frame)


def inverse(p: Pose) -> Pose:
    return Pose(p.rotation.T, -(p.rotation.T @ p.translation),
                p.to_frame, p.from_frame)


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# Level forward camera: columns are the camera axes expressed in base coords.
_R_CAM_LEVEL = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def camera_extrinsic(mount_height: float, pitch: float = 0.0,
                     yaw: float = 0.0) -> Pose:
    """Pose base<-camera for a camera mounted above the base origin.

    ``pitch`` rotates the optical axis about the camera's x (right) axis:
    positive looks up, negative looks down.  ``yaw`` rotates about base z
    (positive = left).  With pitch=yaw=0 the optical axis is base +x.
    """
    r = rot_z(yaw) @ _R_CAM_LEVEL @ rot_x(pitch)
    return Pose(r, np.array([0.0, 0.0, mount_height]), "camera", "base")


def base_in_world(x: float, y: float, heading: float) -> Pose:
    """Pose world<-base for a robot at (x, y) facing ``heading`` (ccw from +x)."""
    return Pose(rot_z(heading), np.array([x, y, 0.0]), "base", "world")


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics, valid depth range, and mounting extrinsic."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    min_depth: float
    max_depth: float
    extrinsic: Pose = field(default_factory=lambda: camera_extrinsic(1.0))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractViolationError("principal point outside image")
        if not (0 < self.min_depth < self.max_depth):
            raise ContractViolationError("need 0 < min_depth < max_depth")

    @staticmethod
    def from_hfov(width: int, height: int, hfov: float, min_depth: float = 0.1,
                  max_depth: float = 10.0, extrinsic: Pose | None = None) -> "CameraModel":
        """Square-pixel model from a horizontal field of view (radians)."""
        fx = (width / 2.0) / np.tan(hfov / 2.0)
        kw = {} if extrinsic is None else {"extrinsic": extrinsic}
        return CameraModel(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                           width=width, height=height,
                           min_depth=min_depth, max_depth=max_depth, **kw)


@dataclass(frozen=True)
class DepthImage:
    """Row-major float32 depth in meters; 0.0 marks invalid pixels."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 2:
            raise ContractViolationError("depth image must be 2-D")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def backproject(depth: DepthImage, cam: CameraModel) -> "PointCloud":
    """Lift valid depth pixels into a camera-frame point cloud.

    Scans pixels row-major; invalid (0.0 or non-finite) pixels emit nothing.
    """
    from .cloud import PointCloud

    d = depth.data
    if d.shape != (cam.height, cam.width):
        raise ContractViolationError(
            f"depth {d.shape} does not match camera {(cam.height, cam.width)}")
    valid = np.isfinite(d) & (d != 0.0)
    vs, us = np.nonzero(valid)
    dd = d[vs, us].astype(np.float64)
    x = (us - cam.cx) * dd / cam.fx
    y = (vs - cam.cy) * dd / cam.fy
    return PointCloud(np.stack([x, y, dd], axis=1), frame="camera")


def project(points: np.ndarray, cam: CameraModel):
    """Inverse of backproject: camera-frame points -> (u, v, depth) arrays."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[:, 2]
    if np.any(z <= 0):
        raise ContractViolationError("projection needs positive depth")
    u = pts[:, 0] * cam.fx / z + cam.cx
    v = pts[:, 1] * cam.fy / z + cam.cy
    return u, v, z.copy()


def to_base_frame(depth: DepthImage, cam: CameraModel) -> "PointCloud":
    """Backproject and move into the robot base frame via cam.extrinsic."""
    from .cloud import transform_points

    return transform_points(cam.extrinsic, backproject(depth, cam))


def write_depth(path, depth: DepthImage) -> None:
    """Depth golden-file format: ``DPTH <w> <h>\\n`` + raw LE float32 grid."""
    data = np.ascontiguousarray(depth.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(f"DPTH {depth.width} {depth.height}\n".encode("ascii"))
        f.write(data.tobytes())


def read_depth(path) -> DepthImage:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) != 3 or header[0] != "DPTH":
            raise ValueError(f"{path}: not a DPTH file")
        w, h = int(header[1]), int(header[2])
        raw = f.read(4 * w * h)
    if len(raw) != 4 * w * h:
        raise ValueError(f"{path}: truncated depth payload")
    return DepthImage(np.frombuffer(raw, dtype="<f4").reshape(h, w).copy())
