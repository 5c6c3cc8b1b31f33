"""Pinhole camera model, rigid poses, and depth-map geometry.

Conventions (used everywhere in the package):
  - depth is z along the camera optical axis, not ray length
  - poses are camera-to-world: world = R @ cam + t
  - integer pixel index (u, v) = (column, row) is the sample location;
    continuous coordinates rasterize via floor(x + 0.5)
  - projection is invalid for camera-frame z <= Z_MIN
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, EmptySupportError
from .kernels import splat_min_z

Z_MIN = 1e-6
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractViolation(
                f"principal point ({self.cx}, {self.cy}) outside raster {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@lru_cache(maxsize=64)
def _ray_grid(fx: float, fy: float, cx: float, cy: float, width: int, height: int):
    us = np.arange(width, dtype=np.float64)
    vs = np.arange(height, dtype=np.float64)
    ray_x = np.broadcast_to((us - cx) / fx, (height, width)).copy()
    ray_y = np.broadcast_to(((vs - cy) / fy)[:, None], (height, width)).copy()
    ray_x.setflags(write=False)
    ray_y.setflags(write=False)
    return ray_x, ray_y


def pixel_ray_grid(k: Intrinsics):
    """Per-pixel camera-frame ray coefficients ((u-cx)/fx, (v-cy)/fy)."""
    return _ray_grid(k.fx, k.fy, k.cx, k.cy, k.width, k.height)


def _as_readonly(a: np.ndarray, dtype=None) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: world = rotation @ cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _as_readonly(self.rotation, np.float64)
        t = _as_readonly(self.translation, np.float64)
        if rot.shape != (3, 3) or t.shape != (3,):
            raise ContractViolation(f"pose shapes must be (3,3)/(3,), got {rot.shape}/{t.shape}")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHO_TOL:
            raise ContractViolation("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ContractViolation("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points from camera to world coordinates."""
        return points @ self.rotation.T + self.translation


def _check_grid(values: np.ndarray, valid: np.ndarray, name: str):
    if values.ndim < 2 or valid.shape != values.shape[:2]:
        raise ContractViolation(f"{name}: values {values.shape} and valid {valid.shape} disagree")


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) z-depth in meters
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        _check_grid(self.values, self.valid, "DepthMap")
        vals = self.values[self.valid]
        if vals.size and not (np.all(np.isfinite(vals)) and np.all(vals > 0)):
            raise ContractViolation("valid depth pixels must be finite and > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @staticmethod
    def full(values: np.ndarray) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return DepthMap(values, np.ones(values.shape, dtype=bool))


@dataclass
class PointMap:
    points: np.ndarray  # (H, W, 3) world coordinates in meters
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        _check_grid(self.points, self.valid, "PointMap")


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3) unit vectors, camera frame
    valid: np.ndarray

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        _check_grid(self.normals, self.valid, "NormalMap")
        norms = np.linalg.norm(self.normals[self.valid], axis=-1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ContractViolation("valid normals must be unit length within 1e-6")


def backproject(depth: DepthMap, k: Intrinsics, pose: Pose) -> PointMap:
    """Lift a depth map to a world-frame point map.

    Camera point for pixel (u, v) at depth d: ((u-cx)d/fx, (v-cy)d/fy, d).
    """
    if depth.shape != k.shape:
        raise ContractViolation(f"depth raster {depth.shape} does not match intrinsics {k.shape}")
    ray_x, ray_y = pixel_ray_grid(k)
    d = depth.values
    cam = np.stack([ray_x * d, ray_y * d, d], axis=-1)
    return PointMap(pose.apply(cam), depth.valid.copy())


def project_points(points_world: np.ndarray, k: Intrinsics, pose: Pose,
                   z_min: float = Z_MIN):
    """Vectorized pinhole projection of (..., 3) world points.

    Returns (u, v, z, valid); u/v are continuous pixel coordinates and z is
    camera-frame depth. Points with z <= z_min are flagged invalid (their
    u/v are not meaningful).
    """
    pts = np.asarray(points_world, dtype=np.float64)
    cam = (pts - pose.translation) @ pose.rotation
    z = cam[..., 2]
    valid = z > z_min
    safe_z = np.where(valid, z, 1.0)
    u = k.fx * cam[..., 0] / safe_z + k.cx
    v = k.fy * cam[..., 1] / safe_z + k.cy
    return u, v, z, valid


def project(point_world: np.ndarray, k: Intrinsics, pose: Pose,
            z_min: float = Z_MIN):
    """Project one world point; returns (u, v, z) or None when behind camera."""
    u, v, z, valid = project_points(np.asarray(point_world, dtype=np.float64), k, pose, z_min)
    if not valid:
        return None
    return float(u), float(v), float(z)


def relative_pose(src: Pose, tgt: Pose) -> Pose:
    """Transform mapping src-camera coordinates into tgt-camera coordinates."""
    rot = tgt.rotation.T @ src.rotation
    trans = tgt.rotation.T @ (src.translation - tgt.translation)
    return Pose(rot, trans)


def warp_depth_detailed(src_depth: DepthMap, rel: Pose, k: Intrinsics,
                        z_min: float = Z_MIN):
    """Forward-splat src depth through rel (src cam -> tgt cam) with a z-buffer.

    Returns (warped_z, mask, src_index, dz_dd) where src_index holds the
    winning source pixel's linear index per covered target pixel (-1
    elsewhere) and dz_dd is the (H, W) source-pixel derivative of target z
    with respect to source depth (used for straight-through gradients).
    """
    if src_depth.shape != k.shape:
        raise ContractViolation(f"depth raster {src_depth.shape} does not match intrinsics {k.shape}")
    ray_x, ray_y = pixel_ray_grid(k)
    out_z, out_src = splat_min_z(src_depth.values, src_depth.valid, ray_x, ray_y,
                                 rel.rotation, rel.translation,
                                 k.fx, k.fy, k.cx, k.cy, z_min)
    mask = out_src >= 0
    rot = rel.rotation
    dz_dd = rot[2, 0] * ray_x + rot[2, 1] * ray_y + rot[2, 2]
    return out_z, mask, out_src, dz_dd


def warp_depth(src_depth: DepthMap, rel: Pose, k: Intrinsics,
               z_min: float = Z_MIN):
    """Warp src depth into the target grid; mask marks pixels that got a splat."""
    out_z, mask, _, _ = warp_depth_detailed(src_depth, rel, k, z_min)
    return DepthMap(np.where(mask, out_z, 0.0), mask), mask


def normals_from_depth(depth: DepthMap, k: Intrinsics) -> NormalMap:
    """Camera-frame unit normals from central differences of the point map.

    A pixel is valid when both horizontal and both vertical neighbors carry
    valid depth; normals are oriented toward the camera (n . view < 0).
    """
    if depth.shape != k.shape:
        raise ContractViolation(f"depth raster {depth.shape} does not match intrinsics {k.shape}")
    pm = backproject(depth, k, Pose.identity())
    pts, val = pm.points, pm.valid
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (val[1:-1, :-2] & val[1:-1, 2:] & val[:-2, 1:-1] & val[2:, 1:-1])
    if ok.any():
        tan_u = np.zeros((h, w, 3))
        tan_v = np.zeros((h, w, 3))
        tan_u[1:-1, 1:-1] = pts[1:-1, 2:] - pts[1:-1, :-2]
        tan_v[1:-1, 1:-1] = pts[2:, 1:-1] - pts[:-2, 1:-1]
        n = np.cross(tan_u, tan_v)
        ray_x, ray_y = pixel_ray_grid(k)
        view_dot = n[..., 0] * ray_x + n[..., 1] * ray_y + n[..., 2]
        n = np.where((view_dot > 0)[..., None], -n, n)
        norm = np.linalg.norm(n, axis=-1)
        ok &= norm > 1e-12
        normals[ok] = n[ok] / norm[ok][:, None]
    return NormalMap(normals, ok)


def mean_valid_depth(depth: DepthMap) -> float:
    if not depth.valid.any():
        raise EmptySupportError("depth map has no valid pixels")
    return float(depth.values[depth.valid].mean())


def covisibility_mask(depth_ref: DepthMap, cam_ref: tuple, depth_other: DepthMap,
                      cam_other: tuple, rel_tol: float = 0.02) -> np.ndarray:
    """Per-pixel test: is the ref view's surface point also visible in the
    other view? Uses ground truth on both sides: back-project ref depth,
    project into the other camera, and accept when the projected z agrees
    with the other view's depth at the nearest pixel within rel_tol
    (absorbing rasterization quantization).
    """
    k_ref, pose_ref = cam_ref
    k_other, pose_other = cam_other
    pm = backproject(depth_ref, k_ref, pose_ref)
    u, v, z, valid = project_points(pm.points, k_other, pose_other)
    iu = np.floor(u + 0.5).astype(np.int64)
    iv = np.floor(v + 0.5).astype(np.int64)
    inb = valid & (iu >= 0) & (iu < k_other.width) & (iv >= 0) & (iv < k_other.height)
    out = np.zeros(depth_ref.shape, dtype=bool)
    if not inb.any():
        return out
    iu_c = np.clip(iu, 0, k_other.width - 1)
    iv_c = np.clip(iv, 0, k_other.height - 1)
    other_d = depth_other.values[iv_c, iu_c]
    other_ok = depth_other.valid[iv_c, iu_c]
    agree = np.abs(z - other_d) <= rel_tol * np.maximum(z, 1e-12)
    out = depth_ref.valid & inb & other_ok & agree
    return out
