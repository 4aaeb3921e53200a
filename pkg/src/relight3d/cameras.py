"""Camera poses and ray generation.

Conventions: world is z-up and right-handed; a camera looks down its local -z
axis with +y up. Extrinsics are world-to-camera [R|t] stored row-major, and
the 12-vector conditioning input is the flattened extrinsic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_FOV_DEG = 50.0


@dataclass
class CameraPose:
    azimuth_deg: float
    elevation_deg: float
    radius: float

    def __post_init__(self) -> None:
        az = math.radians(self.azimuth_deg)
        el = math.radians(self.elevation_deg)
        center = np.array(
            [
                self.radius * math.cos(el) * math.cos(az),
                self.radius * math.cos(el) * math.sin(az),
                self.radius * math.sin(el),
            ],
            dtype=np.float64,
        )
        forward = -center / np.linalg.norm(center)  # toward the origin
        up_hint = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up_hint)
        norm = np.linalg.norm(right)
        if norm < 1e-9:  # looking straight down/up; pick a stable right vector
            right = np.array([0.0, 1.0, 0.0])
            norm = 1.0
        right = right / norm
        up = np.cross(right, forward)
        # rows of R are the camera axes expressed in world coordinates
        self.rotation = np.stack([right, up, -forward]).astype(np.float64)
        self.center = center
        self._translation: np.ndarray | None = None  # set when built from a stored extrinsic

    @property
    def extrinsic(self) -> np.ndarray:
        """3x4 world-to-camera [R|t] with t = -R @ center."""
        t = self._translation if self._translation is not None else -self.rotation @ self.center
        return np.concatenate([self.rotation, t[:, None]], axis=1)

    @property
    def vec12(self) -> np.ndarray:
        return self.extrinsic.reshape(-1).astype(np.float32)

    @classmethod
    def from_vec12(cls, vec: np.ndarray) -> "CameraPose":
        ext = np.asarray(vec, dtype=np.float64).reshape(3, 4)
        rot = ext[:, :3]
        center = -rot.T @ ext[:, 3]
        radius = float(np.linalg.norm(center))
        elevation = math.degrees(math.asin(np.clip(center[2] / radius, -1.0, 1.0)))
        azimuth = math.degrees(math.atan2(center[1], center[0])) % 360.0
        pose = cls(azimuth, elevation, radius)
        # keep the exact matrix (round trips bitwise through vec12)
        pose.rotation = rot
        pose.center = center
        pose._translation = ext[:, 3]
        return pose

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) @ self.rotation.T

    def normalized(self, canonical_radius: float) -> "CameraPose":
        """Rescale the camera distance to a canonical value, keeping orientation."""
        pose = CameraPose(self.azimuth_deg, self.elevation_deg, canonical_radius)
        pose.rotation = self.rotation.copy()
        pose.center = self.center * (canonical_radius / np.linalg.norm(self.center))
        return pose


def make_camera_rig(
    elevation_deg: float,
    radius: float,
    n: int = 4,
    azimuth0_deg: float = 0.0,
) -> list[CameraPose]:
    """`n` cameras at equal azimuth spacing and identical elevation, looking at the origin."""
    if n < 1:
        raise ValueError("rig needs at least one camera")
    step = 360.0 / n
    return [CameraPose(azimuth0_deg + k * step, elevation_deg, radius) for k in range(n)]


def pixel_rays(
    camera: CameraPose,
    height: int,
    width: int,
    fov_deg: float = DEFAULT_FOV_DEG,
    row0: int = 0,
    col0: int = 0,
    full_height: int | None = None,
    full_width: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions through pixel centers.

    `row0/col0/full_*` select a crop window out of a virtual full-resolution
    image, so rendering a crop's rays directly equals cropping a full render.
    Returns (origins (H,W,3), directions (H,W,3)); FOV is vertical.
    """
    fh = full_height if full_height is not None else height
    fw = full_width if full_width is not None else width
    focal = 0.5 * fh / math.tan(0.5 * math.radians(fov_deg))
    rows = row0 + np.arange(height, dtype=np.float64) + 0.5
    cols = col0 + np.arange(width, dtype=np.float64) + 0.5
    x = (cols[None, :] - 0.5 * fw) / focal
    y = (0.5 * fh - rows[:, None]) / focal
    dirs_cam = np.stack(
        [np.broadcast_to(x, (height, width)), np.broadcast_to(y, (height, width)), -np.ones((height, width))],
        axis=-1,
    )
    dirs_world = dirs_cam @ camera.rotation  # R^T applied to rows
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs_world.shape).copy()
    return origins, dirs_world


def project_to_pixels(
    camera: CameraPose,
    points: np.ndarray,
    height: int,
    width: int,
    fov_deg: float = DEFAULT_FOV_DEG,
) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to continuous pixel coordinates (row, col) and ray depth.

    Depth is the distance from the camera center along the ray (matching the
    depth channel written by the renderers).
    """
    pc = camera.world_to_camera(points)
    focal = 0.5 * height / math.tan(0.5 * math.radians(fov_deg))
    z = -pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        col = pc[..., 0] / z * focal + 0.5 * width - 0.5
        row = 0.5 * height - pc[..., 1] / z * focal - 0.5
    depth = np.linalg.norm(pc, axis=-1)
    rows_cols = np.stack([row, col], axis=-1)
    return rows_cols, depth
