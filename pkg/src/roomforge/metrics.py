"""Geometric evaluation: proxy-alignment, coverage, hole fraction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import render
from .errors import NoAttributedVertices
from .meshing import SceneMesh
from .scene import ProxyRoom, Viewpoint

_MIN_INSTANCE_VERTICES = 50


@dataclass
class MetricsReport:
    pa_geom: float = 0.0
    coverage: float = 0.0
    hole_fraction: float = 0.0
    per_instance: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "pa_geom": self.pa_geom,
            "coverage": self.coverage,
            "hole_fraction": self.hole_fraction,
            "per_instance": {str(k): v for k, v in sorted(self.per_instance.items())},
        }


def pa_score(mesh: SceneMesh, room: ProxyRoom, inflate: float = 0.01):
    """Fraction of each instance's vertices inside its (inflated) box.

    Returns (pa_geom, per_instance); pa_geom averages instances with at
    least 50 attributed vertices. Requires fusion-time provenance.
    """
    if mesh.instances is None or not (mesh.instances > 0).any():
        raise NoAttributedVertices("mesh carries no instance provenance")
    per_instance: dict[int, float] = {}
    scored = []
    for box in room.boxes:
        sel = mesh.instances == box.instance_id
        n = int(sel.sum())
        if n == 0:
            continue
        v = mesh.vertices[sel]
        lo = np.asarray(box.min_corner) - inflate
        hi = np.asarray(box.max_corner) + inflate
        inside = np.all((v >= lo) & (v <= hi), axis=1)
        fraction = float(inside.mean())
        per_instance[box.instance_id] = fraction
        if n >= _MIN_INSTANCE_VERTICES:
            scored.append(fraction)
    pa_geom = float(np.mean(scored)) if scored else 0.0
    return pa_geom, per_instance


def _cube_faces(position, res: int) -> list[Viewpoint]:
    views = [Viewpoint(position, yaw=k * math.pi / 2, fov_h=90.0, width=res, height=res)
             for k in range(4)]
    views.append(Viewpoint(position, yaw=0.0, pitch=math.pi / 2, fov_h=90.0,
                           width=res, height=res))
    views.append(Viewpoint(position, yaw=0.0, pitch=-math.pi / 2, fov_h=90.0,
                           width=res, height=res))
    return views


def coverage_score(mesh: SceneMesh, room: ProxyRoom, samples: int = 10000) -> float:
    """Solid-angle fraction of directions from the room centroid that hit
    the mesh within the shell bounds.

    Rays are the pixel centers of six 90-degree cube faces, weighted by
    their exact per-pixel solid angle.
    """
    if mesh.empty:
        return 0.0
    cx, cz = room.shell.centroid_xz()
    position = (cx, room.shell.height / 2.0, cz)
    res = max(2, int(math.ceil(math.sqrt(samples / 6.0))))

    covered = 0.0
    total = 0.0
    margin = 0.1
    for v in _cube_faces(position, res):
        x_n, y_n = render.camera.normalized_grid(v)
        solid = (2.0 / res) ** 2 / np.power(x_n * x_n + y_n * y_n + 1.0, 1.5)
        mr = render.render_mesh(mesh, v)
        dirs = render.camera.pixel_directions(v, world=True)
        shell_t, _, shell_hit = render._shell_cast(room, np.asarray(position), dirs)
        limit = np.where(shell_hit, shell_t, np.inf) + margin
        hit = (~mr.mask) & (mr.depth * render.camera.ray_scale(v) <= limit)
        covered += float(solid[hit].sum())
        total += float(solid.sum())
    return covered / total


def evaluate(mesh: SceneMesh, room: ProxyRoom, hole_fraction: float,
             inflate: float = 0.05, samples: int = 10000) -> MetricsReport:
    try:
        pa, per_inst = pa_score(mesh, room, inflate)
    except NoAttributedVertices:
        pa, per_inst = 0.0, {}
    return MetricsReport(
        pa_geom=pa,
        coverage=coverage_score(mesh, room, samples),
        hole_fraction=hole_fraction,
        per_instance=per_inst,
    )
