"""Equirectangular <-> perspective geometry for the 8-view fan.

The fan holds 8 cameras sharing one position (90 deg FOV, yaw steps of
45 deg); adjacent views are related by exact rotation-only homographies
K R_j^T R_i K^-1. Panoramas are 2:1 equirectangular grids; longitude 0 /
latitude 0 maps to world +z.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import cv2
import numpy as np

from . import camera
from .errors import NegativeDistance, ResolutionMismatch
from .scene import Viewpoint

FAN_VIEWS = 8
FAN_FOV = 90.0
FAN_STEP = math.tau / FAN_VIEWS  # 45 degrees


@dataclass(frozen=True)
class PanoramaGrid:
    """2:1 equirectangular pixel grid."""

    height: int
    width: int

    def __post_init__(self):
        if self.width != 2 * self.height:
            raise ResolutionMismatch(f"panorama must be 2:1, got {self.width}x{self.height}")

    def lonlat(self) -> tuple[np.ndarray, np.ndarray]:
        lon = math.tau * (np.arange(self.width) + 0.5) / self.width - math.pi
        lat = math.pi / 2 - math.pi * (np.arange(self.height) + 0.5) / self.height
        return (
            np.broadcast_to(lon[None, :], (self.height, self.width)),
            np.broadcast_to(lat[:, None], (self.height, self.width)),
        )

    def directions(self) -> np.ndarray:
        """Unit direction per pixel, shape (H, W, 3)."""
        lon, lat = self.lonlat()
        return camera.lonlat_to_direction(lon, lat)

    def to_pixel(self, lon: np.ndarray, lat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous index coordinates (column, row) for lon/lat."""
        u = (lon + math.pi) / math.tau * self.width - 0.5
        v = (math.pi / 2 - lat) / math.pi * self.height - 0.5
        return u, v


@dataclass(frozen=True)
class ViewFan:
    """8 viewpoints sharing a position: pitch=roll=0, yaw = k * 45 deg."""

    views: tuple[Viewpoint, ...]

    def __post_init__(self):
        if len(self.views) != FAN_VIEWS:
            raise ResolutionMismatch(f"fan needs {FAN_VIEWS} views, got {len(self.views)}")

    @property
    def position(self) -> tuple[float, float, float]:
        return self.views[0].position

    @property
    def resolution(self) -> int:
        return self.views[0].width

    def rotations(self) -> list[np.ndarray]:
        return [camera.rotation_matrix(v) for v in self.views]


@dataclass
class ViewCorrespondence:
    source: int
    target: int
    homography: np.ndarray  # 3x3, maps (u, v, 1) source pixels to target pixels
    validity: np.ndarray  # (H, W) bool: source pixels landing inside the target


def build_fan(position, view_resolution: int = 512) -> ViewFan:
    if view_resolution <= 0:
        raise ResolutionMismatch("view resolution must be positive")
    views = tuple(
        Viewpoint(
            position=tuple(float(c) for c in position),
            yaw=k * FAN_STEP,
            pitch=0.0,
            roll=0.0,
            fov_h=FAN_FOV,
            width=view_resolution,
            height=view_resolution,
        )
        for k in range(FAN_VIEWS)
    )
    return ViewFan(views)


def homography(fan: ViewFan, i: int, j: int) -> np.ndarray:
    """Pixel homography K R_j^T R_i K^-1 (shared K, pure rotation).

    Kept unnormalized (det 1): the sign of the projected w coordinate then
    distinguishes directions in front of the target from those behind it.
    """
    k = camera.intrinsic_matrix(fan.views[i])
    r_i = camera.rotation_matrix(fan.views[i])
    r_j = camera.rotation_matrix(fan.views[j])
    return k @ r_j.T @ r_i @ np.linalg.inv(k)


def correspondence(fan: ViewFan, i: int, j: int) -> ViewCorrespondence:
    if i == j:
        raise ValueError("correspondence requires distinct views")
    h = homography(fan, i, j)
    res = fan.resolution
    uu, vv = np.meshgrid(np.arange(res) + 0.5, np.arange(res) + 0.5)
    pts = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ h.T
    w = pts[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tu = pts[..., 0] / w
        tv = pts[..., 1] / w
    validity = (w > 0) & (tu >= 0) & (tu <= res) & (tv >= 0) & (tv <= res)
    return ViewCorrespondence(i, j, h, validity)


def export_correspondences(fan: ViewFan) -> str:
    """JSON hand-off for the remote generator: adjacent-pair homographies."""
    records = []
    for k in range(FAN_VIEWS):
        h = homography(fan, k, (k + 1) % FAN_VIEWS)
        records.append({
            "source": k,
            "target": (k + 1) % FAN_VIEWS,
            "homography": [float(x) for x in h.reshape(-1)],
        })
    return json.dumps(records, indent=2)


# ---------------------------------------------------------------------------
# Sampling helpers

def _gather_bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray,
                     wrap_u: bool = False) -> np.ndarray:
    """Sample img at continuous index coords (u=col, v=row); clamp edges."""
    h, w = img.shape[:2]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = (u - u0)[..., None] if img.ndim == 3 else (u - u0)
    fv = (v - v0)[..., None] if img.ndim == 3 else (v - v0)
    if wrap_u:
        u0w, u1w = u0 % w, (u0 + 1) % w
    else:
        u0w, u1w = np.clip(u0, 0, w - 1), np.clip(u0 + 1, 0, w - 1)
    v0c, v1c = np.clip(v0, 0, h - 1), np.clip(v0 + 1, 0, h - 1)
    top = img[v0c, u0w] * (1 - fu) + img[v0c, u1w] * fu
    bot = img[v1c, u0w] * (1 - fu) + img[v1c, u1w] * fu
    return top * (1 - fv) + bot * fv


def _gather_nearest(img: np.ndarray, u: np.ndarray, v: np.ndarray,
                    wrap_u: bool = False) -> np.ndarray:
    h, w = img.shape[:2]
    ui = np.rint(u).astype(np.int64)
    vi = np.clip(np.rint(v).astype(np.int64), 0, h - 1)
    ui = ui % w if wrap_u else np.clip(ui, 0, w - 1)
    return img[vi, ui]


def _view_sample_coords(fan: ViewFan, k: int, dirs: np.ndarray):
    """Pano directions -> (u, v index coords, x_n, y_n, in_front) for view k."""
    rot = camera.rotation_matrix(fan.views[k])
    d_cam = dirs @ rot
    z = d_cam[..., 2]
    in_front = z > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        x_n = np.where(in_front, d_cam[..., 0] / z, np.inf)
        y_n = np.where(in_front, d_cam[..., 1] / z, np.inf)
    v = fan.views[k]
    u = v.focal * x_n + v.width / 2.0 - 0.5
    vv = -v.focal * y_n + v.height / 2.0 - 0.5
    return u, vv, x_n, y_n, in_front


def _view_weight(x_n: np.ndarray, y_n: np.ndarray, in_front: np.ndarray) -> np.ndarray:
    """Cosine falloff from the optical axis, zero at/after the image border."""
    hx = np.cos(np.clip(np.abs(x_n), 0.0, 1.0) * (math.pi / 2))
    hy = np.cos(np.clip(np.abs(y_n), 0.0, 1.0) * (math.pi / 2))
    inside = in_front & (np.abs(x_n) <= 1.0) & (np.abs(y_n) <= 1.0)
    return np.where(inside, hx * hy, 0.0)


def _check_views(images) -> int:
    if len(images) != FAN_VIEWS:
        raise ResolutionMismatch(f"expected {FAN_VIEWS} view images, got {len(images)}")
    res = images[0].shape[0]
    for img in images:
        if img.shape[0] != res or img.shape[1] != res:
            raise ResolutionMismatch("view images must share one square resolution")
    return res


# ---------------------------------------------------------------------------
# Pyramid blending

def _pyr_pad(levels: int) -> int:
    return 4 * (1 << levels)


def _build_gaussian(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(cv2.pyrDown(pyr[-1]))
    return pyr


def _build_laplacian(img: np.ndarray, levels: int) -> list[np.ndarray]:
    gauss = _build_gaussian(img, levels)
    pyr = []
    for lvl in range(levels - 1):
        up = cv2.pyrUp(gauss[lvl + 1], dstsize=(gauss[lvl].shape[1], gauss[lvl].shape[0]))
        pyr.append(gauss[lvl] - up)
    pyr.append(gauss[-1])
    return pyr


def _collapse(pyr: list[np.ndarray]) -> np.ndarray:
    out = pyr[-1]
    for lvl in range(len(pyr) - 2, -1, -1):
        out = cv2.pyrUp(out, dstsize=(pyr[lvl].shape[1], pyr[lvl].shape[0])) + pyr[lvl]
    return out


def _blend_warped(warped: list[np.ndarray], weights: list[np.ndarray],
                  levels: int) -> np.ndarray:
    """Laplacian-pyramid blend with horizontal wrap; weights already normalized.

    The collapsed weight pyramid renormalizes the output: near the coverage
    boundary the smoothed weights fade below 1 while the edge-extended
    content stays valid, and the division undoes that attenuation.
    """
    pad = _pyr_pad(levels)
    acc: list[np.ndarray] | None = None
    wacc: list[np.ndarray] | None = None
    for img, wgt in zip(warped, weights):
        img_p = np.concatenate([img[:, -pad:], img, img[:, :pad]], axis=1).astype(np.float32)
        wgt_p = np.concatenate([wgt[:, -pad:], wgt, wgt[:, :pad]], axis=1).astype(np.float32)
        lap = _build_laplacian(img_p, levels)
        gw = _build_gaussian(wgt_p, levels)
        if acc is None:
            acc = [np.zeros_like(l) for l in lap]
            wacc = [np.zeros_like(g) for g in gw]
        for lvl in range(levels):
            w_lvl = gw[lvl][..., None] if img_p.ndim == 3 else gw[lvl]
            acc[lvl] += lap[lvl] * w_lvl
            wacc[lvl] += gw[lvl]
    for lvl in range(levels):
        w = np.maximum(wacc[lvl], 1e-6)
        acc[lvl] = acc[lvl] / (w[..., None] if acc[lvl].ndim == 3 else w)
    blended = _collapse(acc)
    return blended[:, pad:-pad]


def _fill_polar(img: np.ndarray, covered: np.ndarray) -> np.ndarray:
    """Clamp-extrapolate uncovered rows (polar caps) from the nearest valid row."""
    if covered.all():
        return img
    out = img.copy()
    h = img.shape[0]
    rows = np.arange(h)
    any_cov = covered.any(axis=0)
    first = np.where(any_cov, covered.argmax(axis=0), 0)
    last = np.where(any_cov, h - 1 - covered[::-1].argmax(axis=0), h - 1)
    row_idx = np.clip(np.broadcast_to(rows[:, None], covered.shape), first[None, :], last[None, :])
    col_idx = np.broadcast_to(np.arange(img.shape[1])[None, :], covered.shape)
    fill = img[row_idx, col_idx]
    need = ~covered
    out[need] = fill[need]
    return out


def views_to_equirect(images, fan: ViewFan, pano: PanoramaGrid, levels: int = 5) -> np.ndarray:
    """Warp the 8 views onto the panorama and pyramid-blend the overlaps.

    Accepts (H', H') or (H', H', C) float/uint8 images; returns float32.
    """
    res = _check_views(images)
    if res != fan.resolution:
        raise ResolutionMismatch(f"images are {res}px but fan views are {fan.resolution}px")
    if levels < 1:
        raise ValueError("levels must be >= 1")

    dirs = pano.directions()
    warped, weights = [], []
    total = np.zeros((pano.height, pano.width), dtype=np.float64)
    for k in range(FAN_VIEWS):
        u, v, x_n, y_n, in_front = _view_sample_coords(fan, k, dirs)
        img = np.asarray(images[k], dtype=np.float32)
        safe_u = np.where(np.isfinite(u), u, 0.0)
        safe_v = np.where(np.isfinite(v), v, 0.0)
        warped.append(_gather_bilinear(img, safe_u, safe_v).astype(np.float32))
        w = _view_weight(x_n, y_n, in_front)
        weights.append(w)
        total += w

    covered = total > 0
    norm = np.where(covered, total, 1.0)
    weights = [(w / norm).astype(np.float32) for w in weights]
    blended = _blend_warped(warped, weights, levels)
    return _fill_polar(blended, covered)


def fan_coverage(fan: ViewFan, pano: PanoramaGrid) -> np.ndarray:
    """Pano pixels actually observed by the fan (polar caps are not)."""
    dirs = pano.directions()
    total = np.zeros((pano.height, pano.width))
    for k in range(FAN_VIEWS):
        _, _, x_n, y_n, in_front = _view_sample_coords(fan, k, dirs)
        total += _view_weight(x_n, y_n, in_front)
    return total > 0


def fuse_distance_panorama(distance_views, fan: ViewFan, pano: PanoramaGrid,
                           levels: int = 5) -> np.ndarray:
    """Blend per-view ray-distance maps into a panorama distance map."""
    for d in distance_views:
        if np.any(np.asarray(d) < 0):
            raise NegativeDistance("distance views must be non-negative")
    fused = views_to_equirect(distance_views, fan, pano, levels)
    return np.maximum(fused, 0.0)


def equirect_to_views(panorama: np.ndarray, fan: ViewFan, interp: str = "bilinear"):
    """Resample a panorama into the 8 perspective views.

    Use interp="nearest" for label maps, "bilinear" for continuous maps.
    """
    panorama = np.asarray(panorama)
    if panorama.shape[1] != 2 * panorama.shape[0]:
        raise ResolutionMismatch("panorama must be 2:1")
    grid = PanoramaGrid(panorama.shape[0], panorama.shape[1])
    out = []
    for k in range(FAN_VIEWS):
        dirs = camera.pixel_directions(fan.views[k], world=True)
        lon, lat = camera.direction_to_lonlat(dirs)
        u, v = grid.to_pixel(lon, lat)
        if interp == "nearest":
            out.append(_gather_nearest(panorama, u, v, wrap_u=True))
        else:
            out.append(_gather_bilinear(panorama.astype(np.float64), u, v, wrap_u=True))
    return out


def mosaic_labels(label_views, fan: ViewFan, pano: PanoramaGrid) -> np.ndarray:
    """Assemble label maps into a panorama: per pixel, highest-weight view wins."""
    _check_views(label_views)
    dirs = pano.directions()
    best_w = np.full((pano.height, pano.width), -1.0)
    out = np.zeros((pano.height, pano.width), dtype=np.asarray(label_views[0]).dtype)
    for k in range(FAN_VIEWS):
        u, v, x_n, y_n, in_front = _view_sample_coords(fan, k, dirs)
        w = _view_weight(x_n, y_n, in_front)
        labels = _gather_nearest(
            np.asarray(label_views[k]),
            np.where(np.isfinite(u), u, 0.0),
            np.where(np.isfinite(v), v, 0.0),
        )
        better = w > best_w
        out = np.where(better, labels, out)
        best_w = np.where(better, w, best_w)
    # polar rows: clamp from nearest covered latitude
    covered = best_w > 0
    return _fill_polar(out, covered)
