"""Shading-free rendering of proxy rooms and triangle meshes.

The proxy renderer casts one ray per pixel (centers at i+0.5) against the
semantic boxes and the shell prism; depths are z-depths along the camera
forward axis. The mesh renderer is a z-buffered perspective rasterizer
with per-vertex color interpolation and no back-face culling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import camera
from .errors import CameraOutsideScene
from .scene import ProxyRoom, SemanticBox, Viewpoint

_PARALLEL_EPS = 1e-300  # |d| below this is treated as parallel to the slab


@dataclass
class ControlFrames:
    """Rendered control maps for one viewpoint: S, I, D_n, D_f."""

    semantics: np.ndarray  # (H, W) int32 class ids
    instances: np.ndarray  # (H, W) int32 instance ids, 0 = none
    near_depth: np.ndarray  # (H, W) float64 z-depth, meters
    far_depth: np.ndarray  # (H, W) float64 z-depth, meters
    viewpoint: Viewpoint


@dataclass
class MeshRender:
    """Rendered mesh frame: color F, z-depth D (0 = no hit), hole mask M."""

    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float64, 0 where no triangle covers the pixel
    mask: np.ndarray  # (H, W) bool, True where nothing was observed
    viewpoint: Viewpoint
    triangle: np.ndarray = field(default=None, repr=False)  # (H, W) int32, -1 = none
    bary: np.ndarray = field(default=None, repr=False)  # (H, W, 3) float32


def ray_box_intersect(origin, direction, box: SemanticBox):
    """Slab-method ray/AABB test.

    Returns (t_enter, t_exit) with t_enter <= t_exit and t_exit > 0, or None
    when the box is missed or lies entirely behind the origin. Grazing hits
    count; the origin may be inside the box (t_enter <= 0).
    """
    t_near, t_far = -np.inf, np.inf
    for axis in range(3):
        o, d = float(origin[axis]), float(direction[axis])
        lo = box.center[axis] - box.size[axis] / 2.0
        hi = box.center[axis] + box.size[axis] / 2.0
        if abs(d) < _PARALLEL_EPS:
            if o < lo or o > hi:
                return None
            continue
        t0 = (lo - o) / d
        t1 = (hi - o) / d
        if t0 > t1:
            t0, t1 = t1, t0
        t_near = max(t_near, t0)
        t_far = min(t_far, t1)
    if t_near > t_far or t_far <= 0.0:
        return None
    return t_near, t_far


def _box_slabs(origin: np.ndarray, dirs: np.ndarray, box: SemanticBox):
    """Vectorized slab test; dirs shape (..., 3). Returns t_enter, t_exit, valid."""
    t_near = np.full(dirs.shape[:-1], -np.inf)
    t_far = np.full(dirs.shape[:-1], np.inf)
    ok = np.ones(dirs.shape[:-1], dtype=bool)
    for axis in range(3):
        o = float(origin[axis])
        d = dirs[..., axis]
        lo = box.center[axis] - box.size[axis] / 2.0
        hi = box.center[axis] + box.size[axis] / 2.0
        parallel = np.abs(d) < _PARALLEL_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo - o) / d
            t1 = (hi - o) / d
        swap = t0 > t1
        t0s = np.where(swap, t1, t0)
        t1s = np.where(swap, t0, t1)
        t_near = np.where(parallel, t_near, np.maximum(t_near, t0s))
        t_far = np.where(parallel, t_far, np.minimum(t_far, t1s))
        ok &= np.where(parallel, (o >= lo) & (o <= hi), True)
    valid = ok & (t_near <= t_far) & (t_far > 0.0)
    return t_near, t_far, valid


def _shell_cast(room: ProxyRoom, origin: np.ndarray, dirs: np.ndarray):
    """Nearest shell hit per ray: (t, class_id, hit)."""
    palette = room.palette
    shape = dirs.shape[:-1]
    best_t = np.full(shape, np.inf)
    best_c = np.zeros(shape, dtype=np.int32)
    oy = float(origin[1])
    dy = dirs[..., 1]
    height = room.shell.height
    poly = np.asarray(room.shell.floor_polygon, dtype=np.float64)

    for plane_y, class_id in ((0.0, palette.floor_id), (height, palette.ceiling_id)):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (plane_y - oy) / dy
        cand = np.isfinite(t) & (t > 0.0)
        if cand.any():
            with np.errstate(invalid="ignore"):
                px = origin[0] + t * dirs[..., 0]
                pz = origin[2] + t * dirs[..., 2]
            inside = _points_in_polygon(poly, px, pz)
            cand &= inside & (t < best_t)
            best_t = np.where(cand, t, best_t)
            best_c = np.where(cand, class_id, best_c)

    dx, dz = dirs[..., 0], dirs[..., 2]
    ox, oz = float(origin[0]), float(origin[2])
    n = len(poly)
    wall_id = palette.wall_id
    for i in range(n):
        x0, z0 = poly[i]
        x1, z1 = poly[(i + 1) % n]
        ex, ez = x1 - x0, z1 - z0
        denom = dx * ez - dz * ex
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((x0 - ox) * ez - (z0 - oz) * ex) / denom
            s = ((z0 - oz) * dx - (x0 - ox) * dz) / (-denom)
            y = oy + t * dy
        cand = (
            np.isfinite(t) & (t > 0.0)
            & (s >= 0.0) & (s <= 1.0)
            & (y >= 0.0) & (y <= height)
            & (t < best_t)
        )
        best_t = np.where(cand, t, best_t)
        best_c = np.where(cand, wall_id, best_c)

    hit = np.isfinite(best_t)
    return best_t, best_c, hit


def _points_in_polygon(poly: np.ndarray, px: np.ndarray, pz: np.ndarray) -> np.ndarray:
    """Vectorized even-odd test against a (N, 2) polygon."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, z0 = poly[i]
        x1, z1 = poly[(i + 1) % n]
        crosses = (z0 > pz) != (z1 > pz)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pz - z0) / (z1 - z0)
            xcross = x0 + t * (x1 - x0)
        inside ^= crosses & (px < xcross)
    return inside


def render_controls(room: ProxyRoom, v: Viewpoint) -> ControlFrames:
    """Cast camera rays against boxes and shell, producing S, I, D_n, D_f.

    Nearest box entry wins (ties broken by smaller instance id); box exits
    are capped at the shell hit so the far bound never leaves the room.
    Pixels without a box hit take the shell class with D_n == D_f.
    """
    dirs_cam = camera.pixel_directions(v, world=False)
    rot = camera.rotation_matrix(v)
    dirs_world = dirs_cam @ rot.T
    dz = dirs_cam[..., 2]
    origin = np.asarray(v.position, dtype=np.float64)

    shell_t, shell_class, shell_hit = _shell_cast(room, origin, dirs_world)
    if (~shell_hit).mean() > 0.5:
        raise CameraOutsideScene(
            f"{(~shell_hit).mean():.0%} of rays miss the shell; camera at {v.position}"
        )
    # numeric fallback for stray edge rays: treat as wall at the far shell bound
    if (~shell_hit).any():
        x0, z0, x1, z1 = room.shell.bounds_xz()
        fallback_t = float(np.hypot(x1 - x0, z1 - z0) + room.shell.height)
        shell_t = np.where(shell_hit, shell_t, fallback_t)
        shell_class = np.where(shell_hit, shell_class, room.palette.wall_id)

    best_enter = np.full(shell_t.shape, np.inf)
    best_exit = np.full(shell_t.shape, np.inf)
    best_instance = np.zeros(shell_t.shape, dtype=np.int32)
    best_class = np.zeros(shell_t.shape, dtype=np.int32)
    for box in sorted(room.boxes, key=lambda b: b.instance_id):
        t_enter, t_exit, valid = _box_slabs(origin, dirs_world, box)
        valid &= t_enter < shell_t
        better = valid & (t_enter < best_enter)
        best_enter = np.where(better, t_enter, best_enter)
        best_exit = np.where(better, t_exit, best_exit)
        best_instance = np.where(better, box.instance_id, best_instance)
        best_class = np.where(better, box.class_id, best_class)

    has_box = best_instance > 0
    semantics = np.where(has_box, best_class, shell_class).astype(np.int32)
    instances = np.where(has_box, best_instance, 0).astype(np.int32)
    shell_z = shell_t * dz
    near = np.where(has_box, np.maximum(best_enter, 0.0) * dz, shell_z)
    far = np.where(has_box, np.minimum(best_exit, shell_t) * dz, shell_z)
    return ControlFrames(semantics, instances, near, far, v)


# ---------------------------------------------------------------------------
# Mesh rasterization

_Z_NEAR = 1e-3  # meters; triangles are clipped against this camera plane
_KEY_SENTINEL = np.uint64(0xFFFFFFFFFFFFFFFF)
_CHUNK_BUDGET = 2_000_000  # max pixel-candidate entries held at once


def render_mesh(mesh, v: Viewpoint) -> MeshRender:
    """Z-buffered rasterization of a colored triangle mesh (no culling)."""
    h, w = v.height, v.width
    color = np.zeros((h, w, 3), dtype=np.uint8)
    depth = np.zeros((h, w), dtype=np.float64)
    mask = np.ones((h, w), dtype=bool)
    tri_map = np.full((h, w), -1, dtype=np.int32)
    bary_map = np.zeros((h, w, 3), dtype=np.float32)

    verts = np.asarray(mesh.vertices, dtype=np.float64)
    tris = np.asarray(mesh.triangles, dtype=np.int64)
    if len(tris) == 0 or len(verts) == 0:
        return MeshRender(color, depth, mask, v, tri_map, bary_map)

    rot = camera.rotation_matrix(v)
    cam = (verts - np.asarray(v.position)) @ rot
    vcols = np.asarray(mesh.colors, dtype=np.float64)

    # near-plane clip: emit screen-space triangles tagged with source index
    sx, sy, sz, src = _clip_triangles(cam, tris, v)
    if len(src) == 0:
        return MeshRender(color, depth, mask, v, tri_map, bary_map)

    keybuf = np.full(h * w, _KEY_SENTINEL, dtype=np.uint64)
    inv_z = 1.0 / sz
    # raster in chunks bounded by total candidate-pixel count
    order = np.arange(len(src))
    x_min = np.maximum(np.floor(sx.min(axis=1) - 0.5), 0).astype(np.int64)
    x_max = np.minimum(np.ceil(sx.max(axis=1) - 0.5), w - 1).astype(np.int64)
    y_min = np.maximum(np.floor(sy.min(axis=1) - 0.5), 0).astype(np.int64)
    y_max = np.minimum(np.ceil(sy.max(axis=1) - 0.5), h - 1).astype(np.int64)
    bw = x_max - x_min + 1
    bh = y_max - y_min + 1
    visible = (bw > 0) & (bh > 0)
    order = order[visible]
    areas = (bw * bh)[visible]

    start = 0
    csum = np.cumsum(areas)
    while start < len(order):
        base = csum[start - 1] if start > 0 else 0
        stop = int(np.searchsorted(csum, base + _CHUNK_BUDGET, side="right")) + 1
        stop = min(max(stop, start + 1), len(order))
        sel = order[start:stop]
        _raster_chunk(sel, sx, sy, inv_z, x_min, x_max, y_min, y_max, w, keybuf)
        start = stop

    covered = keybuf != _KEY_SENTINEL
    if covered.any():
        flat_idx = np.nonzero(covered)[0]
        win = (keybuf[flat_idx] & np.uint64(0xFFFFFFFF)).astype(np.int64)
        px = (flat_idx % w).astype(np.float64) + 0.5
        py = (flat_idx // w).astype(np.float64) + 0.5
        l0, l1, l2 = _barycentric(sx[win], sy[win], px, py)
        iz = l0 * inv_z[win, 0] + l1 * inv_z[win, 1] + l2 * inv_z[win, 2]
        z = 1.0 / iz
        # perspective-correct vertex attribute weights
        w0 = l0 * inv_z[win, 0] * z
        w1 = l1 * inv_z[win, 1] * z
        w2 = l2 * inv_z[win, 2] * z
        tri_src = src[win]
        vi = tris[tri_src]
        cols = (
            vcols[vi[:, 0]] * w0[:, None]
            + vcols[vi[:, 1]] * w1[:, None]
            + vcols[vi[:, 2]] * w2[:, None]
        )
        rows = flat_idx // w
        colsx = flat_idx % w
        color[rows, colsx] = np.clip(np.rint(cols), 0, 255).astype(np.uint8)
        depth[rows, colsx] = z
        mask[rows, colsx] = False
        tri_map[rows, colsx] = tri_src.astype(np.int32)
        bary_map[rows, colsx] = np.stack([w0, w1, w2], axis=-1).astype(np.float32)

    return MeshRender(color, depth, mask, v, tri_map, bary_map)


def _clip_triangles(cam: np.ndarray, tris: np.ndarray, v: Viewpoint):
    """Clip camera-space triangles against z = _Z_NEAR and project to screen.

    Returns screen x/y (T, 3), camera z (T, 3) and source triangle index (T,).
    """
    z = cam[:, 2]
    tz = z[tris]
    front = tz > _Z_NEAR
    n_front = front.sum(axis=1)

    keep = np.nonzero(n_front == 3)[0]
    parts_x, parts_y, parts_z, parts_src = [], [], [], []
    if len(keep):
        vi = tris[keep]
        p = cam[vi]
        parts_x.append(p[..., 0])
        parts_y.append(p[..., 1])
        parts_z.append(p[..., 2])
        parts_src.append(keep)

    straddle = np.nonzero((n_front > 0) & (n_front < 3))[0]
    for ti in straddle:
        poly = []
        idx = tris[ti]
        for k in range(3):
            a, b = cam[idx[k]], cam[idx[(k + 1) % 3]]
            if a[2] > _Z_NEAR:
                poly.append(a)
            if (a[2] > _Z_NEAR) != (b[2] > _Z_NEAR):
                t = (_Z_NEAR - a[2]) / (b[2] - a[2])
                poly.append(a + t * (b - a))
        for k in range(1, len(poly) - 1):
            fan = np.stack([poly[0], poly[k], poly[k + 1]])
            parts_x.append(fan[None, :, 0])
            parts_y.append(fan[None, :, 1])
            parts_z.append(fan[None, :, 2])
            parts_src.append(np.array([ti]))

    if not parts_src:
        empty = np.zeros((0, 3))
        return empty, empty, empty, np.zeros(0, dtype=np.int64)
    cx = np.concatenate(parts_x)
    cy = np.concatenate(parts_y)
    cz = np.concatenate(parts_z)
    src = np.concatenate(parts_src)
    f = v.focal
    sx = f * cx / cz + v.width / 2.0
    sy = -f * cy / cz + v.height / 2.0
    return sx, sy, cz, src


def _barycentric(tx, ty, px, py):
    """Screen-space barycentric coordinates; tx/ty are (N, 3), px/py (N,)."""
    d = (ty[:, 1] - ty[:, 2]) * (tx[:, 0] - tx[:, 2]) + (tx[:, 2] - tx[:, 1]) * (ty[:, 0] - ty[:, 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        l0 = ((ty[:, 1] - ty[:, 2]) * (px - tx[:, 2]) + (tx[:, 2] - tx[:, 1]) * (py - ty[:, 2])) / d
        l1 = ((ty[:, 2] - ty[:, 0]) * (px - tx[:, 2]) + (tx[:, 0] - tx[:, 2]) * (py - ty[:, 2])) / d
        l2 = 1.0 - l0 - l1
    return l0, l1, l2


def _raster_chunk(sel, sx, sy, inv_z, x_min, x_max, y_min, y_max, w, keybuf):
    bw = (x_max[sel] - x_min[sel] + 1)
    bh = (y_max[sel] - y_min[sel] + 1)
    counts = bw * bh
    total = int(counts.sum())
    if total == 0:
        return
    tri_of = np.repeat(np.arange(len(sel)), counts)
    # per-candidate offset within its triangle's bbox
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    bwr = bw[tri_of]
    ox = local % bwr
    oy = local // bwr
    px = (x_min[sel][tri_of] + ox).astype(np.float64) + 0.5
    py = (y_min[sel][tri_of] + oy).astype(np.float64) + 0.5

    tsel = sel[tri_of]
    l0, l1, l2 = _barycentric(sx[tsel], sy[tsel], px, py)
    eps = -1e-9
    inside = (l0 >= eps) & (l1 >= eps) & (l2 >= eps) & np.isfinite(l0)
    if not inside.any():
        return
    l0, l1, l2 = l0[inside], l1[inside], l2[inside]
    tsel = tsel[inside]
    px, py = px[inside], py[inside]
    iz = l0 * inv_z[tsel, 0] + l1 * inv_z[tsel, 1] + l2 * inv_z[tsel, 2]
    good = iz > 0
    if not good.any():
        return
    z = (1.0 / iz[good]).astype(np.float32)
    z = np.maximum(z, np.float32(_Z_NEAR))
    tsel = tsel[good]
    flat = (py[good].astype(np.int64) * w + px[good].astype(np.int64))
    key = (z.view(np.uint32).astype(np.uint64) << np.uint64(32)) | tsel.astype(np.uint64)
    np.minimum.at(keybuf, flat, key)
