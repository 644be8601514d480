"""Iterative mesh completion.

Each step renders the current mesh from a favorable viewpoint, Telea-fills
small cracks, expands large holes into a generation mask, asks the
generator to inpaint, aligns the estimated depth against guidance bounds
superimposed with the rendered depth, and fuses the new content back in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import camera, render
from .align import AlignConfig, align_depth, build_guidance, z_to_distance
from .backends import Backends, GeneratorRequest, instance_box_prompt
from .errors import MaskTooLarge, NoValidViewpoint, ValidationError
from .meshing import FusionVolume, OrientedPoints, SceneMesh, clean_mesh, extract_mesh
from .panorama import FAN_VIEWS, FAN_STEP
from .scene import ProxyRoom, ViewLimits, Viewpoint, point_in_box, validate_viewpoint

EYE_HEIGHT = 1.5  # meters; candidate cameras sit at eye height
_BOX_CLEARANCE = 0.10  # meters of inflation when keeping cameras out of boxes


@dataclass
class CompletionConfig:
    max_viewpoints: int = 20
    grid_spacing: float = 1.0  # meters between candidate positions
    small_hole_radius: int = 4  # px; larger holes go to the generator
    erosion_radius: int = 2
    dilation_radius: int = 6
    stop_threshold: float = 0.01  # stop when global hole fraction drops below
    view_resolution: int = 512
    score_resolution: int = 64
    eval_resolution: int = 128
    density_threshold: float = 3.0
    component_threshold: int = 200

    def __post_init__(self):
        if self.dilation_radius < self.erosion_radius:
            raise ValidationError("dilation radius must be >= erosion radius")
        if not 0.0 <= self.stop_threshold < 1.0:
            raise ValidationError("stop threshold must be in [0, 1)")


@dataclass
class CompletionStep:
    viewpoint: Viewpoint
    pre_hole_fraction: float
    post_hole_fraction: float
    frame_ref: str = ""
    trajectory_ref: str = ""

    def to_json(self) -> dict:
        v = self.viewpoint
        return {
            "viewpoint": {"position": list(v.position), "yaw": v.yaw, "pitch": v.pitch,
                          "roll": v.roll, "fov_h": v.fov_h,
                          "width": v.width, "height": v.height},
            "pre_hole_fraction": self.pre_hole_fraction,
            "post_hole_fraction": self.post_hole_fraction,
            "frame": self.frame_ref,
            "trajectory": self.trajectory_ref,
        }


@dataclass
class CompletionState:
    """Mutable completion-loop context owned by the pipeline."""

    room: ProxyRoom
    volume: FusionVolume
    mesh: SceneMesh
    pano_position: tuple[float, float, float]
    seed: int = 0
    align_config: AlignConfig = field(default_factory=AlignConfig)
    steps: list[CompletionStep] = field(default_factory=list)
    artifact_sink: object = None  # callable(name, kind, payload) -> ref, or None


# ---------------------------------------------------------------------------
# Hole handling

def classify_holes(mask: np.ndarray, cfg: CompletionConfig):
    """Partition a hole mask into small (Telea) and large (generator) parts.

    A connected component is small when its maximum inscribed radius is at
    most cfg.small_hole_radius pixels.
    """
    mask = np.asarray(mask, dtype=bool)
    small = np.zeros_like(mask)
    large = np.zeros_like(mask)
    if not mask.any():
        return small, large
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    radius = ndimage.distance_transform_edt(mask)
    max_r = ndimage.maximum(radius, labels=labels, index=np.arange(1, n + 1))
    small_ids = np.nonzero(np.atleast_1d(max_r) <= cfg.small_hole_radius)[0] + 1
    is_small = np.isin(labels, small_ids) & mask
    small[is_small] = True
    large[mask & ~is_small] = True
    return small, large


def _march_distances(mask: np.ndarray):
    """Fast-marching distance from the known region into the mask.

    Returns (T, order): the eikonal distance field and mask pixels sorted by
    increasing distance from the boundary.
    """
    import heapq

    h, w = mask.shape
    inf = np.inf
    t = np.where(mask, inf, 0.0)
    frozen = ~mask
    heap = []
    ys, xs = np.nonzero(mask)
    for y, x in zip(ys.tolist(), xs.tolist()):
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not mask[ny, nx]:
                heapq.heappush(heap, (0.0, ny, nx))
    visited = np.zeros_like(mask)
    order = []
    while heap:
        dist, y, x = heapq.heappop(heap)
        if visited[y, x]:
            continue
        visited[y, x] = True
        if mask[y, x]:
            order.append((y, x))
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if not (0 <= ny < h and 0 <= nx < w) or visited[ny, nx] or not mask[ny, nx]:
                continue
            a = min(t[ny, nx - 1] if nx > 0 else inf, t[ny, nx + 1] if nx < w - 1 else inf)
            b = min(t[ny - 1, nx] if ny > 0 else inf, t[ny + 1, nx] if ny < h - 1 else inf)
            if np.isinf(a) and np.isinf(b):
                cand = dist + 1.0
            elif abs(a - b) < 1.0 and not (np.isinf(a) or np.isinf(b)):
                cand = (a + b + math.sqrt(2.0 - (a - b) ** 2)) / 2.0
            else:
                cand = min(a, b) + 1.0
            if cand < t[ny, nx]:
                t[ny, nx] = cand
                heapq.heappush(heap, (cand, ny, nx))
    return t, order


def telea_inpaint(image: np.ndarray, mask: np.ndarray, radius: int = 3) -> np.ndarray:
    """Fast-marching inpainting after Telea.

    Pixels fill in increasing distance from the hole boundary; each becomes
    a normalized weighted average of already-known neighbors (direction,
    distance and level-set weights, plus the first-order gradient term).
    Unmasked pixels are returned bit-exact.
    """
    mask = np.asarray(mask, dtype=bool)
    image = np.asarray(image, dtype=np.uint8)
    if mask.mean() >= 0.5:
        raise MaskTooLarge(f"inpaint mask covers {mask.mean():.0%} of the image")
    if not mask.any():
        return image.copy()

    h, w = mask.shape
    t, order = _march_distances(mask)
    t_ext = np.where(mask, t, 0.0)
    out = image.astype(np.float64)
    if out.ndim == 2:
        out = out[..., None]
    known = ~mask

    offs = [(dy, dx) for dy in range(-radius, radius + 1)
            for dx in range(-radius, radius + 1)
            if (dy or dx) and dy * dy + dx * dx <= radius * radius]
    for y, x in order:
        grad_ty = (t_ext[min(y + 1, h - 1), x] - t_ext[max(y - 1, 0), x]) / 2.0
        grad_tx = (t_ext[y, min(x + 1, w - 1)] - t_ext[y, max(x - 1, 0)]) / 2.0
        acc = np.zeros(out.shape[-1])
        wsum = 0.0
        for dy, dx in offs:
            ny, nx = y + dy, x + dx
            if not (0 <= ny < h and 0 <= nx < w) or not known[ny, nx]:
                continue
            d2 = dy * dy + dx * dx
            direction = abs(dy * grad_ty + dx * grad_tx) / math.sqrt(d2)
            wgt = (direction + 0.1) * (1.0 / d2) * (1.0 / (1.0 + abs(t_ext[ny, nx] - t[y, x])))
            # first-order term: extend the local image gradient
            gy = (out[ny + 1, nx] - out[ny - 1, nx]) / 2.0 \
                if 0 < ny < h - 1 and known[ny - 1, nx] and known[ny + 1, nx] else 0.0
            gx = (out[ny, nx + 1] - out[ny, nx - 1]) / 2.0 \
                if 0 < nx < w - 1 and known[ny, nx - 1] and known[ny, nx + 1] else 0.0
            value = out[ny, nx] + gy * (-dy) + gx * (-dx)
            acc += wgt * value
            wsum += wgt
        if wsum > 0:
            out[y, x] = acc / wsum
        known[y, x] = True

    filled = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if image.ndim == 2:
        filled = filled[..., 0]
    result = image.copy()
    result[mask] = filled[mask]
    return result


def _disc(radius: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def expand_mask(large_mask: np.ndarray, cfg: CompletionConfig) -> np.ndarray:
    """Erosion then dilation; surviving regions end up grown (k_d >= k_e)."""
    mask = np.asarray(large_mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    eroded = ndimage.binary_erosion(mask, structure=_disc(cfg.erosion_radius))
    return ndimage.binary_dilation(eroded, structure=_disc(cfg.dilation_radius))


# ---------------------------------------------------------------------------
# Viewpoint selection

def _candidate_positions(room: ProxyRoom, cfg: CompletionConfig):
    x0, z0, x1, z1 = room.shell.bounds_xz()
    height = min(EYE_HEIGHT, room.shell.height * 0.6)
    xs = np.arange(x0 + cfg.grid_spacing / 2, x1, cfg.grid_spacing)
    zs = np.arange(z0 + cfg.grid_spacing / 2, z1, cfg.grid_spacing)
    positions = []
    for x in xs:
        for z in zs:
            if not room.shell.contains_xz(float(x), float(z)):
                continue
            p = (float(x), height, float(z))
            if any(point_in_box(b, p, _BOX_CLEARANCE) for b in room.boxes):
                continue
            positions.append(p)
    return positions


def sample_completion_viewpoints(room: ProxyRoom, mesh: SceneMesh,
                                 cfg: CompletionConfig) -> list[Viewpoint]:
    """Rank eye-height grid candidates by visible hole pixels, best first.

    Candidates failing the viewpoint quality checks are dropped, as are
    candidates that see no holes at all.
    """
    positions = _candidate_positions(room, cfg)
    if not positions:
        raise NoValidViewpoint("no camera position clears the boxes inside the shell")
    limits = ViewLimits(probe_resolution=cfg.score_resolution)
    scored = []
    for p in positions:
        for k in range(FAN_VIEWS):
            v = Viewpoint(p, yaw=k * FAN_STEP, fov_h=90.0,
                          width=cfg.score_resolution, height=cfg.score_resolution)
            mr = render.render_mesh(mesh, v)
            score = int(mr.mask.sum())
            if score == 0:
                continue
            if not validate_viewpoint(room, v, limits).ok:
                continue
            scored.append((score, p, k))
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    return [
        Viewpoint(p, yaw=k * FAN_STEP, fov_h=90.0,
                  width=cfg.view_resolution, height=cfg.view_resolution)
        for _, p, k in scored
    ]


# ---------------------------------------------------------------------------
# Step execution

def _commit_colors(mesh: SceneMesh, mr: render.MeshRender, pixels: np.ndarray,
                   colors: np.ndarray) -> SceneMesh:
    """Blend per-pixel colors into the vertices visible at each pixel's
    nearest observed neighbor (small holes have no geometry of their own)."""
    if not pixels.any() or mesh.empty:
        return mesh
    _, (iy, ix) = ndimage.distance_transform_edt(mr.mask, return_indices=True)
    py, px = np.nonzero(pixels)
    ny, nx = iy[py, px], ix[py, px]
    tri = mr.triangle[ny, nx]
    ok = tri >= 0
    if not ok.any():
        return mesh
    tri = tri[ok]
    bary = mr.bary[ny[ok], nx[ok]].astype(np.float64)
    pix_col = colors[py[ok], px[ok]].astype(np.float64)

    verts = mesh.triangles[tri]  # (K, 3)
    acc = np.zeros((len(mesh.vertices), 3), dtype=np.float64)
    wacc = np.zeros(len(mesh.vertices), dtype=np.float64)
    for corner in range(3):
        w = np.clip(bary[:, corner], 0.0, 1.0)
        np.add.at(acc, verts[:, corner], pix_col * w[:, None])
        np.add.at(wacc, verts[:, corner], w)
    touched = wacc > 0
    new_colors = mesh.colors.astype(np.float64)
    blended = (new_colors[touched] + acc[touched]) / (1.0 + wacc[touched, None])
    new_colors[touched] = blended
    return SceneMesh(mesh.vertices, np.clip(np.rint(new_colors), 0, 255).astype(np.uint8),
                     mesh.triangles, instances=mesh.instances)


def _object_masks(cf, masker, rgb):
    masks = {}
    for instance_id in np.unique(cf.instances):
        if instance_id == 0:
            continue
        prompt = instance_box_prompt(cf.instances, int(instance_id))
        masks[int(instance_id)] = masker.mask(rgb, prompt, cf.instances)
    return masks


def complete_step(state: CompletionState, v: Viewpoint, backends: Backends,
                  cfg: CompletionConfig):
    """One completion pass at viewpoint v; returns (state, CompletionStep)."""
    mr = render.render_mesh(state.mesh, v)
    pre_fraction = float(mr.mask.mean())
    small, large = classify_holes(mr.mask, cfg)

    frame = mr.color
    if small.any() and small.mean() < 0.5:
        frame = telea_inpaint(frame, small)

    gen_mask = expand_mask(large, cfg) & ~small

    step = CompletionStep(v, pre_fraction, pre_fraction)
    if not gen_mask.any():
        # nothing for the generator; bake Telea fills into vertex colors
        state.mesh = _commit_colors(state.mesh, mr, small, frame)
        state.steps.append(step)
        return state, step

    cf = render.render_controls(state.room, v)
    req = GeneratorRequest(
        mode="inpaint",
        semantics=[cf.semantics],
        near_depth=[cf.near_depth],
        prompt=state.room.style_prompt,
        seed=state.seed + len(state.steps),
        frame=frame,
        mask=gen_mask,
    )
    generated = backends.generator.inpaint(req)
    depth = backends.depth.estimate(generated, v, seed=req.seed)
    masks = _object_masks(cf, backends.masker, generated)
    guidance = build_guidance(cf, masks, prior=mr)
    aligned, trajectory = align_depth(depth, guidance, state.align_config)

    distance = z_to_distance(aligned)
    dirs = camera.pixel_directions(v, world=True)
    sel = gen_mask
    points = OrientedPoints(
        positions=np.asarray(v.position) + dirs[sel] * distance[sel][:, None],
        colors=generated[sel],
        normals=None,
        ray_origin=v.position,
        instances=cf.instances[sel],
    )
    state.volume.integrate(points)
    state.mesh = clean_mesh(extract_mesh(state.volume),
                            cfg.density_threshold, cfg.component_threshold)

    post_render = render.render_mesh(state.mesh, v)
    if small.any():
        state.mesh = _commit_colors(state.mesh, post_render, small, frame)
    step.post_hole_fraction = float(post_render.mask.mean())

    if state.artifact_sink is not None:
        idx = len(state.steps)
        step.frame_ref = state.artifact_sink(f"step_{idx:03d}", {
            "frame": generated,
            "mask": gen_mask,
            "semantics": cf.semantics,
            "near_depth": cf.near_depth,
            "aligned_depth": aligned.values,
            "prior_depth": mr.depth,
            "prior_mask": mr.mask,
            "trajectory": trajectory,
            "step": step,
        })
    state.steps.append(step)
    return state, step


def evaluation_views(state: CompletionState, cfg: CompletionConfig) -> list[Viewpoint]:
    """Fixed probe set for the global hole fraction: fans at the panorama
    position plus valid positions toward the room corners."""
    shell = state.room.shell
    x0, z0, x1, z1 = shell.bounds_xz()
    cx, _, cz = state.pano_position
    candidates = [(cx, cz)]
    for corner in ((x0, z0), (x0, z1), (x1, z0), (x1, z1)):
        candidates.append(((cx + corner[0]) / 2.0, (cz + corner[1]) / 2.0))
    height = state.pano_position[1]
    views = []
    for x, z in candidates:
        p = (float(x), height, float(z))
        if not shell.contains_xz(p[0], p[2]):
            continue
        if any(point_in_box(b, p, _BOX_CLEARANCE) for b in state.room.boxes):
            continue
        for k in range(FAN_VIEWS):
            views.append(Viewpoint(p, yaw=k * FAN_STEP, fov_h=90.0,
                                   width=cfg.eval_resolution, height=cfg.eval_resolution))
    return views


def global_hole_fraction(mesh: SceneMesh, views: list[Viewpoint]) -> float:
    if not views:
        return 0.0
    return float(np.mean([render.render_mesh(mesh, v).mask.mean() for v in views]))


def run_completion(state: CompletionState, backends: Backends,
                   cfg: CompletionConfig) -> CompletionState:
    """Greedy completion loop: rank viewpoints, step, re-rank, until the
    global hole fraction drops below the stop threshold or the viewpoint
    budget is exhausted."""
    eval_views = evaluation_views(state, cfg)
    for _ in range(cfg.max_viewpoints):
        if global_hole_fraction(state.mesh, eval_views) <= cfg.stop_threshold:
            break
        ranked = sample_completion_viewpoints(state.room, state.mesh, cfg)
        if not ranked:
            break
        state, _ = complete_step(state, ranked[0], backends, cfg)
    return state
