import logging
from typing import Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from kinefit.exceptions import BehindCameraError, InvalidInputError

logger = logging.getLogger(__name__)

# Points closer to the camera plane than this are not projected
MIN_DEPTH = 1e-6


class CameraIntrinsics(BaseModel):
    """Pinhole intrinsics; the world frame is the camera frame (x right, y down, z forward)."""
    fx: float = Field(500.0, gt=0)
    fy: float = Field(500.0, gt=0)
    cx: float = Field(320.0, ge=0)
    cy: float = Field(240.0, ge=0)
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def principal_point_inside_image(self):
        if not (self.cx < self.width and self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        return self

    def contains(self, uv: np.ndarray) -> np.ndarray:
        """True for pixel positions inside the image bounds."""
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= 0) & (uv[..., 0] < self.width)
            & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)
        )


def _as_points(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.shape[-1] != 3:
        raise InvalidInputError(f"expected 3D points, got shape {points.shape}")
    return points


def _check_depth(points: np.ndarray) -> None:
    if np.any(points[..., 2] <= MIN_DEPTH):
        raise BehindCameraError(f"point at z <= {MIN_DEPTH} m cannot be projected")


def project_points(cam: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """
    Project 3D points onto the image plane.

    Args:
        cam (CameraIntrinsics): Pinhole intrinsics.
        points (np.ndarray): (..., 3) points in meters.

    Returns:
        np.ndarray: (..., 2) pixel coordinates.

    Raises:
        BehindCameraError: If any point has z <= 1e-6 m.
    """
    points = _as_points(points)
    _check_depth(points)
    z = points[..., 2]
    return np.stack([
        cam.fx * points[..., 0] / z + cam.cx,
        cam.fy * points[..., 1] / z + cam.cy,
    ], axis=-1)


def project_points_jacobian(cam: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """d(project)/d(point) for every point, shape (..., 2, 3)."""
    points = _as_points(points)
    _check_depth(points)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    inv_z = 1.0 / z
    jac = np.zeros(points.shape[:-1] + (2, 3))
    jac[..., 0, 0] = cam.fx * inv_z
    jac[..., 0, 2] = -cam.fx * x * inv_z ** 2
    jac[..., 1, 1] = cam.fy * inv_z
    jac[..., 1, 2] = -cam.fy * y * inv_z ** 2
    return jac


def project(cam: CameraIntrinsics, p: Sequence[float]) -> np.ndarray:
    """Project a single point: (fx x / z + cx, fy y / z + cy)."""
    p = _as_points(p)
    if p.shape != (3,):
        raise InvalidInputError(f"expected a 3-vector, got shape {p.shape}")
    return project_points(cam, p)


def project_jacobian(cam: CameraIntrinsics, p: Sequence[float]) -> np.ndarray:
    """2x3 derivative of `project` at a single point."""
    p = _as_points(p)
    if p.shape != (3,):
        raise InvalidInputError(f"expected a 3-vector, got shape {p.shape}")
    return project_points_jacobian(cam, p)
