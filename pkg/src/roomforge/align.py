"""Depth-to-layout alignment.

Builds per-pixel near/far depth bounds from control frames, object masks
and prior mesh renders, then runs subgradient descent on the bound loss
plus a normal preservation term, with normals anchored to the initial
depth. Depths are z-depths; z_to_distance converts to ray distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import camera
from .errors import DivergenceError, MissingMask, ValidationError
from .render import ControlFrames, MeshRender
from .scene import Viewpoint

_MIN_DEPTH = 1e-4
_NORMAL_EPS = 1e-12


@dataclass
class GuidanceDepth:
    """Per-pixel feasible depth interval [near, far]; fixed pixels pin both."""

    near: np.ndarray
    far: np.ndarray
    fixed_mask: np.ndarray  # bool, True where near == far is mandated

    def __post_init__(self):
        if np.any(self.near > self.far + 1e-12):
            raise ValidationError("guidance requires near <= far everywhere")
        if np.any(self.near[self.fixed_mask] != self.far[self.fixed_mask]):
            raise ValidationError("fixed pixels must have near == far")


@dataclass
class DepthField:
    """Strictly positive z-depth map tied to the viewpoint that produced it."""

    values: np.ndarray
    viewpoint: Viewpoint

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("depth field must be finite")
        if np.any(self.values <= 0):
            raise ValidationError("depth field must be strictly positive")


@dataclass
class NormalField:
    """Unit camera-frame normals; zero rows mark undefined pixels."""

    normals: np.ndarray  # (H, W, 3)
    defined: np.ndarray  # (H, W) bool


@dataclass
class AlignConfig:
    steps: int = 600
    step_size: float = 2e-3  # meters per unit per-pixel subgradient
    normal_weight: float = 0.5
    tolerance: float = 0.01  # meters; slack used by convergence checks
    prefit_scale_shift: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.step_size <= 0:
            raise ValidationError("step size must be > 0")
        if self.normal_weight < 0:
            raise ValidationError("normal weight must be >= 0")


def build_guidance(cf: ControlFrames, object_masks: dict[int, np.ndarray],
                   prior: MeshRender | None = None) -> GuidanceDepth:
    """Assemble depth bounds for one frame.

    Box pixels outside their object mask collapse to the background bound
    (near := far). Pixels already observed in the prior render are pinned
    to the rendered depth so new content meets existing geometry.
    """
    near = cf.near_depth.copy()
    far = cf.far_depth.copy()
    fixed = np.zeros(near.shape, dtype=bool)

    for instance_id in np.unique(cf.instances):
        if instance_id == 0:
            continue
        if instance_id not in object_masks:
            raise MissingMask(f"instance {instance_id} visible but no object mask provided")
        mask = np.asarray(object_masks[instance_id], dtype=bool)
        if mask.shape != near.shape:
            raise ValidationError(f"object mask for instance {instance_id} has wrong shape")
        background = (cf.instances == instance_id) & ~mask
        near[background] = far[background]

    if prior is not None:
        observed = ~prior.mask
        near[observed] = prior.depth[observed]
        far[observed] = prior.depth[observed]
        fixed |= observed

    return GuidanceDepth(near, far, fixed)


def loss_depth(d: DepthField | np.ndarray, g: GuidanceDepth):
    """Bound loss: 0 inside [near, far], L1 distance to the nearest bound outside.

    Returns (mean loss, gradient of the mean w.r.t. each pixel).
    """
    values = d.values if isinstance(d, DepthField) else np.asarray(d, dtype=np.float64)
    if values.shape != g.near.shape:
        raise ValidationError("depth and guidance shapes differ")
    below = values < g.near
    above = values > g.far
    per_pixel = np.where(below, g.near - values, np.where(above, values - g.far, 0.0))
    sign = np.where(below, -1.0, np.where(above, 1.0, 0.0))
    return float(per_pixel.mean()), sign / per_pixel.size


def _rays(v: Viewpoint) -> np.ndarray:
    x_n, y_n = camera.normalized_grid(v)
    return np.stack([x_n, y_n, np.ones_like(x_n)], axis=-1)


def _tangents(points: np.ndarray):
    """Central-difference tangents; undefined on the 1-px border."""
    t_x = np.zeros_like(points)
    t_y = np.zeros_like(points)
    t_x[:, 1:-1] = points[:, 2:] - points[:, :-2]
    t_y[1:-1, :] = points[2:, :] - points[:-2, :]
    return t_x, t_y


def compute_normals(d: DepthField) -> NormalField:
    """Surface normals from backprojected depth, oriented toward the camera."""
    rays = _rays(d.viewpoint)
    points = rays * d.values[..., None]
    t_x, t_y = _tangents(points)
    c = np.cross(t_x, t_y)
    norm = np.linalg.norm(c, axis=-1)
    interior = np.zeros(d.values.shape, dtype=bool)
    interior[1:-1, 1:-1] = True
    defined = interior & (norm > _NORMAL_EPS)
    normals = np.zeros_like(c)
    facing = np.sign(np.einsum("ijk,ijk->ij", c, rays))
    flip = np.where(facing > 0, -1.0, 1.0)  # n . ray < 0: toward the camera
    with np.errstate(divide="ignore", invalid="ignore"):
        normals = np.where(defined[..., None], c * (flip / np.maximum(norm, _NORMAL_EPS))[..., None], 0.0)
    return NormalField(normals, defined)


def _normal_chain(d: DepthField, n0: NormalField):
    """Shared geometry for the normal loss and its gradient."""
    rays = _rays(d.viewpoint)
    points = rays * d.values[..., None]
    t_x, t_y = _tangents(points)
    c = np.cross(t_x, t_y)
    norm = np.linalg.norm(c, axis=-1)
    interior = np.zeros(d.values.shape, dtype=bool)
    interior[1:-1, 1:-1] = True
    defined = interior & (norm > _NORMAL_EPS) & n0.defined
    facing = np.sign(np.einsum("ijk,ijk->ij", c, rays))
    flip = np.where(facing > 0, -1.0, 1.0)
    inv_norm = np.where(defined, 1.0 / np.maximum(norm, _NORMAL_EPS), 0.0)
    n_hat = c * (flip * inv_norm)[..., None]
    return rays, t_x, t_y, defined, flip, inv_norm, n_hat


def _chain_gradient(u, rays, t_x, t_y, flip, inv_norm, n_hat, shape):
    """Backpropagate dL/dn = u through normalization, cross product and
    backprojection; returns the per-pixel sum-scale gradient."""
    proj = u - n_hat * np.einsum("ijk,ijk->ij", n_hat, u)[..., None]
    g_c = proj * (flip * inv_norm)[..., None]

    a_field = np.cross(t_y, g_c)  # enters through the x-difference stencil
    b_field = np.cross(g_c, t_x)  # enters through the y-difference stencil

    # each pixel's depth appears with +r in the left/up neighbor's tangent
    # and with -r in the right/down neighbor's tangent
    gx = np.zeros(shape)
    gx[:, 1:] += np.einsum("ijk,ijk->ij", rays[:, 1:], a_field[:, :-1])
    gx[:, :-1] -= np.einsum("ijk,ijk->ij", rays[:, :-1], a_field[:, 1:])
    gy = np.zeros(shape)
    gy[1:, :] += np.einsum("ijk,ijk->ij", rays[1:, :], b_field[:-1, :])
    gy[:-1, :] -= np.einsum("ijk,ijk->ij", rays[:-1, :], b_field[1:, :])
    return gx + gy


def loss_normal(d: DepthField, n0: NormalField):
    """L1 drift of current normals from the anchor normals.

    Returns (mean over defined pixels, gradient of that mean w.r.t. depth).
    The gradient is exact through normalization, cross product and
    backprojection (central-difference stencils couple each pixel to its
    4-neighborhood).
    """
    rays, t_x, t_y, defined, flip, inv_norm, n_hat = _normal_chain(d, n0)
    n_def = int(defined.sum())
    if n_def == 0:
        return 0.0, np.zeros_like(d.values)
    diff = n_hat - n0.normals
    value = float(np.abs(diff[defined]).sum() / n_def)
    u = np.sign(diff) * defined[..., None]
    grad = _chain_gradient(u, rays, t_x, t_y, flip, inv_norm, n_hat, d.values.shape)
    return value, grad / n_def


# force shaping inside the optimizer: the L1 subgradient has constant
# magnitude no matter how small the mismatch, which would let mild
# estimator noise in the anchor fight the depth bounds forever. The force
# therefore scales with the local mismatch (Huberized difference, saturating
# at _FORCE_DELTA) and is normalized against the fully-saturated gradient so
# its per-pixel magnitude is resolution independent, capped at _FORCE_CAP.
_FORCE_DELTA = 0.08
_FORCE_CAP = 4.0


def _normal_force(d: DepthField, n0: NormalField):
    rays, t_x, t_y, defined, flip, inv_norm, n_hat = _normal_chain(d, n0)
    if not defined.any():
        return np.zeros_like(d.values)
    diff = (n_hat - n0.normals) * defined[..., None]
    u_huber = np.clip(diff / _FORCE_DELTA, -1.0, 1.0)
    u_sign = np.sign(diff)
    g_h = _chain_gradient(u_huber, rays, t_x, t_y, flip, inv_norm, n_hat, d.values.shape)
    g_s = _chain_gradient(u_sign, rays, t_x, t_y, flip, inv_norm, n_hat, d.values.shape)
    scale = np.abs(g_s)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(scale > _NORMAL_EPS, g_h / np.maximum(scale, _NORMAL_EPS), 0.0)
    return _FORCE_CAP * np.clip(ratio, -1.0, 1.0)


def _prefit_scale_shift(values: np.ndarray, g: GuidanceDepth) -> np.ndarray:
    """Fit depth' = a*depth + b minimizing the bound loss (convex in (a, b))."""

    def objective(params):
        a, b = params
        adjusted = np.maximum(a * values + b, _MIN_DEPTH)
        below = adjusted < g.near
        above = adjusted > g.far
        per_pixel = np.where(below, g.near - adjusted, np.where(above, adjusted - g.far, 0.0))
        return float(per_pixel.mean())

    result = minimize(objective, x0=np.array([1.0, 0.0]), method="Powell",
                      options={"xtol": 1e-6, "ftol": 1e-9, "maxiter": 200})
    a, b = result.x
    if not np.isfinite([a, b]).all() or a <= 0:
        return values
    return np.maximum(a * values + b, _MIN_DEPTH)


def align_depth(init: DepthField, g: GuidanceDepth, cfg: AlignConfig | None = None):
    """Drive a depth field into the guidance bounds while preserving shape.

    Runs cfg.steps descent steps on L = L_d + lambda_n * L_n with normals
    anchored at `init`. The bound term contributes its exact +-1 per-pixel
    subgradient; the normal term contributes the shaped force from
    _normal_force, so lambda_n acts as an influence ratio between the two
    terms and the step size stays meaningful across resolutions. Returns
    the aligned field and the per-step (L_d, L_n, L) trajectory.
    """
    cfg = cfg or AlignConfig()
    n0 = compute_normals(init)
    values = init.values.copy()

    initial_bound_loss, _ = loss_depth(values, g)
    if cfg.prefit_scale_shift and initial_bound_loss > 0:
        values = _prefit_scale_shift(values, g)

    n_px = values.size
    eta = cfg.step_size
    trajectory: list[tuple[float, float, float]] = []
    field = DepthField(values, init.viewpoint)
    for step in range(cfg.steps):
        l_d, g_d = loss_depth(field.values, g)
        if cfg.normal_weight > 0:
            l_n, _ = loss_normal(field, n0)
            force_n = _normal_force(field, n0)
        else:
            l_n, force_n = 0.0, None
        total = l_d + cfg.normal_weight * l_n
        trajectory.append((l_d, l_n, total))
        if step >= 50 and total > 10.0 * trajectory[step - 50][2] and total > 1e-9:
            raise DivergenceError(
                f"alignment loss grew from {trajectory[step - 50][2]:.4g} to {total:.4g} "
                f"over 50 steps; reduce the step size"
            )
        direction = g_d * n_px  # exact +-1 subgradient of the bound term
        if force_n is not None:
            # pixels with near == far are hard constraints (shell surfaces,
            # collapsed object background, mesh-pinned seams); shape
            # preservation only applies where the interval leaves freedom
            direction = direction + cfg.normal_weight * force_n * (g.far > g.near)
        update = eta * direction
        if not np.any(update):
            # converged: remaining steps are no-ops
            break
        field = DepthField(np.maximum(field.values - update, _MIN_DEPTH), init.viewpoint)
    return field, trajectory


def z_to_distance(d: DepthField) -> np.ndarray:
    """Ray distance per pixel: z * ||(x_n, y_n, 1)||."""
    return d.values * camera.ray_scale(d.viewpoint)
