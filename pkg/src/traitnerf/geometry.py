"""Pinhole cameras, rays, projection, and plane-sweep homographies.

Extrinsics follow the world-to-camera convention: a world point ``X`` maps to
camera coordinates ``R @ X + t``.  Pixel ``(u, v)`` addresses column ``u`` and
row ``v``; integer coordinates are pixel centers.  Everything here runs in
float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    InvalidCameraError,
    InvalidCountError,
    InvalidRangeError,
)

_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]  # (n_rows, n_cols)

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidCameraError("camera parameters must be finite")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise InvalidCameraError(f"intrinsics must be upper-triangular, got\n{K}")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] <= 0:
            raise InvalidCameraError(f"intrinsics need positive focal entries, got\n{K}")
        if np.max(np.abs(R @ R.T - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidCameraError("rotation must be orthonormal with determinant +1")
        rows, cols = (int(s) for s in self.image_size)
        if rows <= 0 or cols <= 0:
            raise InvalidCameraError(f"image size must be positive, got {self.image_size}")
        for name, arr in (("intrinsics", K), ("rotation", R), ("translation", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "image_size", (rows, cols))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Viewing direction (camera +z) in world coordinates."""
        return self.rotation[2].copy()

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    def to_dict(self) -> dict:
        return {
            "intrinsics": [float(x) for x in self.intrinsics.ravel()],
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict, image_size: Sequence[int] | None = None) -> "Camera":
        size = d.get("image_size", image_size)
        if size is None:
            raise InvalidCameraError("camera entry lacks image_size")
        return cls(
            np.asarray(d["intrinsics"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["translation"], dtype=np.float64),
            tuple(size),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class DepthHypotheses:
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    @property
    def near(self) -> float:
        return float(self.values[0])

    @property
    def far(self) -> float:
        return float(self.values[-1])


def look_at(center, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``(R, t)`` for a camera at ``center`` facing ``target``.

    ``up`` is the world direction that maps to image-down (+v).
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    y = np.asarray(up, dtype=np.float64)
    y = y - z * (y @ z)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z])
    return R, -R @ center


def homography(src: Camera, ref: Camera, z: float, n1=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Plane-induced homography taking reference pixels to source pixels.

    The plane is ``n1 . X_ref = z`` in reference-camera coordinates.
    """
    if not z > 0:
        raise InvalidRangeError(f"plane depth must be positive, got {z}")
    n1 = np.asarray(n1, dtype=np.float64).reshape(3)
    try:
        K_ref_inv = np.linalg.inv(ref.intrinsics)
    except np.linalg.LinAlgError as exc:
        raise InvalidCameraError("reference intrinsics are singular") from exc
    R_rel = src.rotation @ ref.rotation.T
    t_rel = src.translation - R_rel @ ref.translation
    return src.intrinsics @ (R_rel + np.outer(t_rel, n1) / z) @ K_ref_inv


def homographies(src: Camera, ref: Camera, depths: Sequence[float], n1=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Stack of :func:`homography` over depth planes, shape ``(N_D, 3, 3)``."""
    return np.stack([homography(src, ref, float(z), n1) for z in depths])


def ray_for_pixel(cam: Camera, u: float, v: float, near: float, far: float) -> Ray:
    if not near < far:
        raise InvalidRangeError(f"near ({near}) must be below far ({far})")
    if not near > 0:
        raise InvalidRangeError(f"near must be positive, got {near}")
    origins, dirs = pixel_rays(cam, np.array([[u, v]], dtype=np.float64))
    return Ray(origins[0], dirs[0], float(near), float(far))


def pixel_rays(cam: Camera, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-frame origins and unit directions for an ``(N, 2)`` pixel array."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    homo = np.concatenate([uv, np.ones((len(uv), 1))], axis=1)
    d_cam = np.linalg.solve(cam.intrinsics, homo.T).T
    d_world = d_cam @ cam.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.center, d_world.shape).copy()
    return origins, d_world


def project(cam: Camera, x) -> tuple[float, float, float]:
    uv, depth = project_points(cam, np.asarray(x, dtype=np.float64).reshape(1, 3))
    if not depth[0] > 0:
        raise BehindCameraError(f"point {np.asarray(x).tolist()} has camera depth {depth[0]}")
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def project_points(cam: Camera, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection without the behind-camera check.

    Returns ``(uv, depth)``; rows with ``depth <= 0`` carry meaningless pixels
    and must be masked by the caller.
    """
    X = np.asarray(X, dtype=np.float64)
    Xc = X @ cam.rotation.T + cam.translation
    depth = Xc[..., 2]
    pix = Xc @ cam.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = pix[..., :2] / depth[..., None]
    return uv, depth


def depth_hypotheses(near: float, far: float, n: int = 128) -> DepthHypotheses:
    if n < 2:
        raise InvalidCountError(f"need at least 2 depth hypotheses, got {n}")
    if not near < far:
        raise InvalidRangeError(f"near ({near}) must be below far ({far})")
    step = (far - near) / (n - 1)
    values = near + step * np.arange(n, dtype=np.float64)
    values[-1] = far
    return DepthHypotheses(values)


def pixel_grid(n_rows: int, n_cols: int) -> np.ndarray:
    """Row-major ``(n_rows * n_cols, 2)`` array of ``(u, v)`` pixel centers."""
    v, u = np.meshgrid(np.arange(n_rows, dtype=np.float64), np.arange(n_cols, dtype=np.float64), indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)
