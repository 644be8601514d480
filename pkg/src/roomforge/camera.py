"""Camera math shared by the renderers and projection code.

Camera frame: x right, y up, z forward. At yaw=0 the camera looks along
world +z; yaw rotates forward toward +x (yaw=90deg looks along +x).
Positive pitch looks up. Pixel (col i, row j) samples at (i+0.5, j+0.5).
"""

from __future__ import annotations

import numpy as np

from .scene import Viewpoint


def rotation_matrix(v: Viewpoint) -> np.ndarray:
    """Camera-to-world rotation: R = R_yaw @ R_pitch @ R_roll."""
    cy, sy = np.cos(v.yaw), np.sin(v.yaw)
    cp, sp = np.cos(v.pitch), np.sin(v.pitch)
    cr, sr = np.cos(v.roll), np.sin(v.roll)
    r_yaw = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    # pitch > 0 tilts the forward axis up (+y)
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    r_roll = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return r_yaw @ r_pitch @ r_roll


def intrinsic_matrix(v: Viewpoint) -> np.ndarray:
    """K mapping camera-frame directions to homogeneous pixel coordinates.

    u = f*x/z + W/2, vpx = -f*y/z + H/2 (image rows grow downward).
    """
    f = v.focal
    return np.array([[f, 0.0, v.width / 2.0],
                     [0.0, -f, v.height / 2.0],
                     [0.0, 0.0, 1.0]])


def normalized_grid(v: Viewpoint) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel normalized camera coordinates (x_n, y_n), shape (H, W)."""
    f = v.focal
    cols = (np.arange(v.width, dtype=np.float64) + 0.5 - v.width / 2.0) / f
    rows = (v.height / 2.0 - (np.arange(v.height, dtype=np.float64) + 0.5)) / f
    x_n = np.broadcast_to(cols[None, :], (v.height, v.width))
    y_n = np.broadcast_to(rows[:, None], (v.height, v.width))
    return x_n, y_n


def ray_scale(v: Viewpoint) -> np.ndarray:
    """Per-pixel ||(x_n, y_n, 1)||: the z-depth -> ray-distance factor."""
    x_n, y_n = normalized_grid(v)
    return np.sqrt(x_n * x_n + y_n * y_n + 1.0)


def pixel_directions(v: Viewpoint, world: bool = True) -> np.ndarray:
    """Unit ray directions per pixel, shape (H, W, 3)."""
    x_n, y_n = normalized_grid(v)
    d = np.stack([x_n, y_n, np.ones_like(x_n)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    if world:
        d = d @ rotation_matrix(v).T
    return d


def backproject(v: Viewpoint, z_depth: np.ndarray) -> np.ndarray:
    """Camera-frame points from a z-depth map, shape (H, W, 3)."""
    x_n, y_n = normalized_grid(v)
    return np.stack([x_n * z_depth, y_n * z_depth, z_depth], axis=-1)


def project(v: Viewpoint, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points -> (u, v) pixel coordinates and camera z-depth.

    Points behind the camera get z <= 0; callers must mask them.
    """
    rel = np.asarray(points_world, dtype=np.float64) - np.asarray(v.position)
    cam = rel @ rotation_matrix(v)  # R^T applied row-wise
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = v.focal * cam[..., 0] / z + v.width / 2.0
        vpx = -v.focal * cam[..., 1] / z + v.height / 2.0
    return u, vpx, z


def direction_to_lonlat(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World direction -> (longitude, latitude); lon 0 is +z, lat pi/2 is +y."""
    d = np.asarray(d, dtype=np.float64)
    lon = np.arctan2(d[..., 0], d[..., 2])
    lat = np.arcsin(np.clip(d[..., 1] / np.linalg.norm(d, axis=-1), -1.0, 1.0))
    return lon, lat


def lonlat_to_direction(lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
    cl = np.cos(lat)
    return np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=-1)
