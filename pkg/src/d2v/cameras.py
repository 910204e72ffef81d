"""Pinhole cameras and rays.

Convention: right-handed, camera looks down -z, image y down. A pixel at
continuous image coordinates (px, py) maps to the camera-frame direction
((px - cx) / fx, (py - cy) / fy, -1) before normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray  # 3x4 camera-to-world [R | t]

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (3, 4):
            raise ValueError(f"pose must be 3x4, got {self.pose.shape}")
        rot = self.pose[:, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:, 3]


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("require 0 <= t_near < t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(np.asarray(t), self.direction)


def pixel_directions(camera: Camera, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """World-space unit directions for arrays of pixel coordinates."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack(
        [
            (px - camera.cx) / camera.fx,
            (py - camera.cy) / camera.fy,
            -np.ones_like(px),
        ],
        axis=-1,
    )
    d_world = d_cam @ camera.pose[:, :3].T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def generate_ray(camera: Camera, px: float, py: float,
                 t_near: float, t_far: float) -> Ray:
    """Ray through image point (px, py); pixel centers live at i + 0.5."""
    if not (0 <= px <= camera.width and 0 <= py <= camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside image bounds")
    direction = pixel_directions(camera, px, py)
    return Ray(camera.origin.copy(), direction, t_near, t_far)


def camera_rays(camera: Camera, t_near: float, t_far: float):
    """Origins/directions for every pixel center, row-major (H*W, 3)."""
    ys, xs = np.meshgrid(
        np.arange(camera.height) + 0.5, np.arange(camera.width) + 0.5, indexing="ij"
    )
    dirs = pixel_directions(camera, xs.ravel(), ys.ravel())
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return origins, dirs


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world 3x4 for a camera at `position` looking at `target`.

    Builds a proper rotation whose columns are (right, down, backward) in
    world coordinates, consistent with the y-down / -z-forward convention.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    z_axis = -forward
    up = np.asarray(up, dtype=np.float64)
    down = -(up - np.dot(up, z_axis) * z_axis)
    norm = np.linalg.norm(down)
    if norm < 1e-12:
        raise ValueError("camera forward is parallel to the up vector")
    y_axis = down / norm
    x_axis = np.cross(y_axis, z_axis)
    pose = np.empty((3, 4))
    pose[:, 0] = x_axis
    pose[:, 1] = y_axis
    pose[:, 2] = z_axis
    pose[:, 3] = position
    return pose


def orbit_position(look_at, radius: float, azimuth: float, altitude: float) -> np.ndarray:
    """Point on the orbit sphere; azimuth/altitude in radians, +z up."""
    look_at = np.asarray(look_at, dtype=np.float64)
    xy = radius * np.cos(altitude)
    return look_at + np.array(
        [xy * np.cos(azimuth), xy * np.sin(azimuth), radius * np.sin(altitude)]
    )
