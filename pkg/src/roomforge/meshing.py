"""Volumetric fusion and mesh post-processing.

Observations are splatted as truncated signed distances along their rays
into a lattice of running averages; marching cubes extracts the zero
level set. Each vertex carries a support density (observation samples in
its lattice cell) used by the density/component cleaning passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage import measure

from .errors import EmptyResult, OutOfBounds, ValidationError
from .scene import RoomShell

_SPLAT_CHUNK = 400_000  # points per splat batch


@dataclass
class OrientedPoints:
    """Colored, oriented point samples plus the camera center that saw them."""

    positions: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) uint8
    normals: np.ndarray | None
    ray_origin: tuple[float, float, float]
    instances: np.ndarray | None = None  # (N,) int32, 0 = unattributed


@dataclass
class SceneMesh:
    """Triangle mesh with vertex colors (and optional instance provenance)."""

    vertices: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) uint8
    triangles: np.ndarray  # (M, 3) int32
    instances: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max(initial=-1) >= len(self.vertices):
            raise ValidationError("triangle index out of range")

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0


@dataclass
class DensityMesh(SceneMesh):
    """SceneMesh plus per-vertex observation support density."""

    densities: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))

    def __post_init__(self):
        super().__post_init__()
        self.densities = np.asarray(self.densities, dtype=np.float32).reshape(-1)
        if np.any(self.densities < 0):
            raise ValidationError("densities must be >= 0")


class FusionVolume:
    """Truncated-signed-distance lattice with running-average accumulators."""

    def __init__(self, origin, dims, voxel_size: float, truncation_voxels: float = 4.0):
        if voxel_size <= 0:
            raise ValidationError("voxel size must be positive")
        self.origin = np.asarray(origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in dims)
        self.voxel_size = float(voxel_size)
        self.truncation = truncation_voxels * voxel_size
        n = int(np.prod(self.dims))
        self._tsd_sum = np.zeros(n, dtype=np.float64)
        self._weight = np.zeros(n, dtype=np.float64)
        self._color_sum = np.zeros((n, 3), dtype=np.float64)
        self._color_weight = np.zeros(n, dtype=np.float64)
        self._counts = np.zeros(n, dtype=np.int64)
        self._labels = np.zeros(n, dtype=np.int32)

    @classmethod
    def for_shell(cls, shell: RoomShell, voxel_size: float = 0.025,
                  truncation_voxels: float = 4.0, pad_voxels: int = 2) -> "FusionVolume":
        x0, z0, x1, z1 = shell.bounds_xz()
        pad = pad_voxels * voxel_size
        origin = np.array([x0 - pad, -pad, z0 - pad])
        extent = np.array([x1 - x0 + 2 * pad, shell.height + 2 * pad, z1 - z0 + 2 * pad])
        dims = np.ceil(extent / voxel_size).astype(int) + 1
        return cls(origin, dims, voxel_size, truncation_voxels)

    @property
    def total_weight(self) -> float:
        return float(self._weight.sum())

    def lattice_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest lattice point per sample; returns (flat index, in-bounds mask)."""
        idx = np.floor((points - self.origin) / self.voxel_size + 0.5).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)
        nx, ny, nz = self.dims
        flat = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
        return np.where(ok, flat, 0), ok

    def integrate(self, points: OrientedPoints) -> None:
        """Fuse one frame of oriented point samples.

        Raises OutOfBounds when 10% or more of the samples fall outside the
        volume. Re-integrating identical observations leaves the averaged
        tsd field unchanged while support counts keep growing.
        """
        pos = np.asarray(points.positions, dtype=np.float64).reshape(-1, 3)
        if len(pos) == 0:
            return
        _, inside = self.lattice_index(pos)
        if (~inside).mean() >= 0.10:
            raise OutOfBounds(
                f"{(~inside).mean():.0%} of samples outside fusion volume bounds"
            )
        origin = np.asarray(points.ray_origin, dtype=np.float64)
        colors = np.asarray(points.colors, dtype=np.float64).reshape(-1, 3)
        inst = (np.asarray(points.instances, dtype=np.int32).reshape(-1)
                if points.instances is not None else None)

        step = self.voxel_size / 2.0
        offsets = np.arange(-self.truncation, self.truncation + step / 2, step)
        for lo in range(0, len(pos), _SPLAT_CHUNK):
            sl = slice(lo, lo + _SPLAT_CHUNK)
            self._splat(pos[sl], colors[sl], None if inst is None else inst[sl],
                        origin, offsets)

    def _splat(self, pos, colors, inst, origin, offsets):
        rel = pos - origin
        dist = np.linalg.norm(rel, axis=1)
        good = dist > 1e-9
        pos, colors, rel, dist = pos[good], colors[good], rel[good], dist[good]
        if inst is not None:
            inst = inst[good]
        if len(pos) == 0:
            return
        dirs = rel / dist[:, None]
        n = int(np.prod(self.dims))
        npts, noff = len(pos), len(offsets)

        samples = pos[:, None, :] + dirs[:, None, :] * offsets[None, :, None]
        tsd = np.broadcast_to(-offsets[None, :] / self.truncation, (npts, noff))
        flat, ok = self.lattice_index(samples.reshape(-1, 3))
        okf = ok
        idx = flat[okf]
        tsd_flat = tsd.reshape(-1)[okf]
        self._tsd_sum += np.bincount(idx, weights=tsd_flat, minlength=n)
        self._weight += np.bincount(idx, minlength=n).astype(np.float64)

        near_surface = (np.abs(offsets) <= self.voxel_size + 1e-12)
        near_flat = np.broadcast_to(near_surface[None, :], (npts, noff)).reshape(-1) & okf
        if near_flat.any():
            nidx = flat[near_flat]
            self._counts += np.bincount(nidx, minlength=n)
            col_rep = np.repeat(colors, noff, axis=0)[near_flat]
            for c in range(3):
                self._color_sum[:, c] += np.bincount(nidx, weights=col_rep[:, c], minlength=n)
            self._color_weight += np.bincount(nidx, minlength=n).astype(np.float64)
            if inst is not None:
                inst_rep = np.repeat(inst, noff)[near_flat]
                tagged = inst_rep > 0
                if tagged.any():
                    self._labels[nidx[tagged]] = inst_rep[tagged]

    def fields(self):
        """(tsd, observed) grids; unobserved voxels read +1 (free space)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            tsd = np.where(self._weight > 0, self._tsd_sum / np.maximum(self._weight, 1e-12), 1.0)
        return tsd.reshape(self.dims), (self._weight > 0).reshape(self.dims)


def backproject_panorama(rgb: np.ndarray, distance: np.ndarray, position,
                         instances: np.ndarray | None = None) -> OrientedPoints:
    """Lift an RGB-distance panorama to oriented world points.

    Point = position + distance * direction; normals come from the cross
    product of backprojected panorama tangents. Pixels with non-positive
    distance are skipped.
    """
    from .panorama import PanoramaGrid

    rgb = np.asarray(rgb)
    distance = np.asarray(distance, dtype=np.float64)
    if rgb.shape[:2] != distance.shape:
        raise ValidationError("rgb and distance panoramas must share a grid")
    grid = PanoramaGrid(distance.shape[0], distance.shape[1])
    dirs = grid.directions()
    position = np.asarray(position, dtype=np.float64)
    pts = position[None, None, :] + dirs * distance[..., None]

    # tangents wrap horizontally; vertical tangents are one-sided at the poles
    du = np.roll(pts, -1, axis=1) - np.roll(pts, 1, axis=1)
    dv = np.empty_like(pts)
    dv[1:-1] = pts[2:] - pts[:-2]
    dv[0] = pts[1] - pts[0]
    dv[-1] = pts[-1] - pts[-2]
    nrm = np.cross(du, dv)
    length = np.linalg.norm(nrm, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        nrm = np.where(length > 1e-12, nrm / length, 0.0)
    outward = np.einsum("ijk,ijk->ij", nrm, dirs)
    nrm *= np.where(outward > 0, -1.0, 1.0)[..., None]

    valid = distance > 0
    colors = rgb.reshape(-1, rgb.shape[-1])[valid.reshape(-1)] if rgb.ndim == 3 else None
    return OrientedPoints(
        positions=pts[valid],
        colors=np.asarray(colors, dtype=np.uint8) if colors is not None else
        np.zeros((int(valid.sum()), 3), dtype=np.uint8),
        normals=nrm[valid],
        ray_origin=tuple(float(c) for c in position),
        instances=(np.asarray(instances)[valid].astype(np.int32)
                   if instances is not None else None),
    )


def integrate_frame(vol: FusionVolume, points: OrientedPoints) -> FusionVolume:
    vol.integrate(points)
    return vol


def _corner_max(vol: FusionVolume, grid_verts: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Max of a per-voxel field over the 8 lattice corners spanning each
    marching-cubes vertex (vertices sit on lattice edges, so a single
    nearest-point lookup can land half a voxel off the surface)."""
    nx, ny, nz = vol.dims
    base = np.floor(grid_verts).astype(np.int64)
    best = np.zeros(len(grid_verts), dtype=field.dtype)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = base + (dx, dy, dz)
                ok = np.all((idx >= 0) & (idx < (nx, ny, nz)), axis=1)
                flat = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
                values = np.where(ok, field[np.where(ok, flat, 0)], 0)
                best = np.maximum(best, values)
    return best


def extract_mesh(vol: FusionVolume) -> DensityMesh:
    """Marching-cubes triangulation of the tsd zero level set.

    An unobserved (or surface-free) volume yields an empty mesh.
    """
    tsd, observed = vol.fields()
    if not observed.any() or tsd.min() >= 0 or tsd.max() <= 0:
        return DensityMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8),
                           np.zeros((0, 3), dtype=np.int32),
                           instances=np.zeros(0, dtype=np.int32),
                           densities=np.zeros(0, dtype=np.float32))
    mask = None if observed.all() else observed
    try:
        verts, faces, _, _ = measure.marching_cubes(
            tsd.astype(np.float32), level=0.0, mask=mask, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return DensityMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8),
                           np.zeros((0, 3), dtype=np.int32),
                           instances=np.zeros(0, dtype=np.int32),
                           densities=np.zeros(0, dtype=np.float32))

    world = verts * vol.voxel_size + vol.origin
    flat, _ = vol.lattice_index(world)
    with np.errstate(divide="ignore", invalid="ignore"):
        col = np.where(vol._color_weight[flat, None] > 0,
                       vol._color_sum[flat] / np.maximum(vol._color_weight[flat, None], 1e-12),
                       0.0)
    densities = _corner_max(vol, verts, vol._counts).astype(np.float32)
    labels = vol._labels[flat]

    # drop exactly-degenerate (zero area) triangles
    p = world[faces]
    area2 = np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    faces = faces[area2 > 0]

    mesh = DensityMesh(world, np.clip(np.rint(col), 0, 255).astype(np.uint8),
                       faces.astype(np.int32), instances=labels,
                       densities=densities)
    return mesh


def clean_mesh(mesh: DensityMesh, density_threshold: float = 3.0,
               component_threshold: int = 200) -> SceneMesh:
    """Density filter then small-component filter.

    Vertices with density < density_threshold lose their incident faces;
    remaining connected components with fewer vertices than
    component_threshold are deleted; survivors are reindexed.
    """
    if density_threshold < 0 or component_threshold < 0:
        raise ValidationError("cleaning thresholds must be >= 0")
    if mesh.empty:
        return SceneMesh(mesh.vertices, mesh.colors, mesh.triangles,
                         instances=mesh.instances)
    keep_v = mesh.densities >= density_threshold
    faces = mesh.triangles[np.all(keep_v[mesh.triangles], axis=1)]

    if len(faces):
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        adj = coo_matrix(
            (np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
            shape=(len(mesh.vertices), len(mesh.vertices)),
        )
        n_comp, labels = connected_components(adj, directed=False)
        used = np.zeros(len(mesh.vertices), dtype=bool)
        used[faces.reshape(-1)] = True
        counts = np.bincount(labels[used], minlength=n_comp)
        good_comp = counts >= component_threshold
        faces = faces[good_comp[labels[faces[:, 0]]]]

    if len(faces) == 0:
        raise EmptyResult("mesh cleaning removed every face; lower the thresholds")
    if len(faces) == len(mesh.triangles):
        return SceneMesh(mesh.vertices, mesh.colors, mesh.triangles,
                         instances=mesh.instances)

    used = np.unique(faces.reshape(-1))
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return SceneMesh(
        vertices=mesh.vertices[used],
        colors=mesh.colors[used],
        triangles=remap[faces].astype(np.int32),
        instances=None if mesh.instances is None else mesh.instances[used],
    )
