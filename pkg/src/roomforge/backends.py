"""Generative backends: texture generator, depth estimator, instance masker.

Every backend exists twice: a deterministic mock that synthesizes a
consistent world from the proxy geometry, and a remote HTTP adapter
speaking the multipart wire protocol. Mocks are pure functions of
(inputs, seed) so pipeline runs are reproducible bit for bit.
"""

from __future__ import annotations

import email.parser
import email.policy
import json
import math
from dataclasses import dataclass, field

import httpx
import numpy as np

from . import camera, images, panorama, render
from .align import DepthField
from .errors import ProtocolError, TransportError, ValidationError
from .errors import TimeoutError as BackendTimeout
from .scene import ProxyRoom, Viewpoint

GEN_URL_ENV = "ROOMFORGE_GEN_URL"
DEPTH_URL_ENV = "ROOMFORGE_DEPTH_URL"
MASK_URL_ENV = "ROOMFORGE_MASK_URL"


@dataclass
class GeneratorRequest:
    """One generation call: panorama (8 guided views) or masked inpaint."""

    mode: str  # "panorama" | "inpaint"
    semantics: list[np.ndarray]
    near_depth: list[np.ndarray]
    prompt: str
    seed: int
    correspondences: list | None = None  # panorama mode: 8 adjacency records
    frame: np.ndarray | None = None  # inpaint mode: partial RGB
    mask: np.ndarray | None = None  # inpaint mode: pixels to generate

    def __post_init__(self):
        if self.mode == "panorama":
            if len(self.semantics) != 8 or len(self.near_depth) != 8:
                raise ValidationError("panorama request needs exactly 8 views")
            if self.correspondences is None or len(self.correspondences) != 8:
                raise ValidationError("panorama request needs 8 correspondence records")
        elif self.mode == "inpaint":
            if len(self.semantics) != 1 or len(self.near_depth) != 1:
                raise ValidationError("inpaint request carries a single view")
            if self.frame is None or self.mask is None:
                raise ValidationError("inpaint request needs frame and mask")
        else:
            raise ValidationError(f"unknown generator mode {self.mode!r}")


@dataclass
class BackendDescriptor:
    kind: str  # "mock" | "remote"
    endpoint: str = ""
    timeout: float = 60.0
    model_tag: str = ""

    def __post_init__(self):
        if self.kind == "remote" and not self.endpoint:
            raise ValidationError("remote backend requires an endpoint URL")


@dataclass
class Backends:
    """The three pluggable models used by the pipeline."""

    generator: object
    depth: object
    masker: object


# ---------------------------------------------------------------------------
# Mock implementations

def _smooth_noise(shape, seed: int, cells: int = 24, wrap_x: bool = True) -> np.ndarray:
    """Seeded value noise in [-1, 1], bilinear over a coarse grid.

    With wrap_x the field is exactly periodic horizontally (panorama seam).
    """
    from .panorama import _gather_bilinear

    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    h, w = shape
    ch = max(2, cells * h // max(h, w))
    cw = max(2, cells)
    coarse = rng.uniform(-1.0, 1.0, size=(ch, cw))
    rows = (np.arange(h) + 0.5) * ch / h - 0.5
    cols = (np.arange(w) + 0.5) * cw / w - 0.5
    u, v = np.meshgrid(cols, rows)
    return _gather_bilinear(coarse, u, v, wrap_u=wrap_x)


class MockGenerator:
    """Synthesizes textures directly from the control maps.

    Panorama mode paints an equirect image (class color shaded by distance
    plus seeded value noise) and splits it into the 8 fan views, so
    cross-view consistency holds by construction. Inpaint mode runs the
    same per-pixel function on masked pixels only.
    """

    def __init__(self, palette=None):
        self.palette = palette

    def _class_colors(self, max_id: int) -> np.ndarray:
        table = np.zeros((max_id + 1, 3), dtype=np.float64)
        for cid in range(1, max_id + 1):
            if self.palette is not None:
                try:
                    table[cid] = self.palette.color_of(cid)
                    continue
                except KeyError:
                    pass
            table[cid] = images._hash_color(cid)
        return table

    def _paint(self, semantics: np.ndarray, distance: np.ndarray, seed: int) -> np.ndarray:
        table = self._class_colors(int(semantics.max(initial=1)))
        base = table[np.clip(semantics, 0, len(table) - 1)]
        shade = 0.55 + 0.45 * np.exp(-np.maximum(distance, 0.0) / 6.0)
        noise = _smooth_noise(semantics.shape, seed)
        out = base * shade[..., None] + noise[..., None] * 14.0
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)

    def panorama(self, req: GeneratorRequest) -> list[np.ndarray]:
        if req.mode != "panorama":
            raise ValidationError("panorama() requires a panorama-mode request")
        res = req.semantics[0].shape[0]
        fan = panorama.build_fan((0.0, 0.0, 0.0), res)
        grid = panorama.PanoramaGrid(res, 2 * res)
        sem_pano = panorama.mosaic_labels(req.semantics, fan, grid)
        dist_views = [np.asarray(d, dtype=np.float64) * camera.ray_scale(fan.views[k])
                      for k, d in enumerate(req.near_depth)]
        dist_pano = panorama.fuse_distance_panorama(dist_views, fan, grid, levels=3)
        pano_rgb = self._paint(sem_pano, dist_pano, req.seed)
        views = panorama.equirect_to_views(pano_rgb.astype(np.float64), fan)
        return [np.clip(np.rint(v), 0, 255).astype(np.uint8) for v in views]

    def inpaint(self, req: GeneratorRequest) -> np.ndarray:
        if req.mode != "inpaint":
            raise ValidationError("inpaint() requires an inpaint-mode request")
        mask = np.asarray(req.mask, dtype=bool)
        frame = np.asarray(req.frame, dtype=np.uint8).copy()
        if not mask.any():
            return frame
        synth = self._paint(np.asarray(req.semantics[0]),
                            np.asarray(req.near_depth[0], dtype=np.float64), req.seed)
        frame[mask] = synth[mask]
        return frame


class MockDepthEstimator:
    """Oracle depth with a controllable affine distortion and smooth noise.

    Returns a*GT + b + noise(sigma) where GT is the proxy's solid-surface
    z-depth: box front faces on object pixels, shell depth elsewhere.
    Mirrors the scale/shift ambiguity the alignment stage must undo.
    """

    def __init__(self, room: ProxyRoom, scale: float = 1.0, shift: float = 0.0,
                 noise_sigma: float = 0.0):
        self.room = room
        self.scale = scale
        self.shift = shift
        self.noise_sigma = noise_sigma

    def estimate(self, rgb: np.ndarray, viewpoint: Viewpoint, seed: int = 0) -> DepthField:
        cf = render.render_controls(self.room, viewpoint)
        gt = np.where(cf.instances > 0, cf.near_depth, cf.far_depth)
        values = self.scale * gt + self.shift
        if self.noise_sigma > 0:
            noise = _smooth_noise(gt.shape, seed, wrap_x=False)
            std = noise.std()
            if std > 0:
                values = values + noise * (self.noise_sigma / std)
        return DepthField(np.maximum(values, 0.05), viewpoint)


class MockMasker:
    """Oracle instance masks: the instance-map region inside the prompt box."""

    def mask(self, rgb: np.ndarray, box_prompt, instance_map: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = (int(v) for v in box_prompt)
        h, w = instance_map.shape
        if not (0 <= x0 <= x1 <= w and 0 <= y0 <= y1 <= h):
            raise ValidationError(f"box prompt {box_prompt} outside frame bounds {w}x{h}")
        rect = np.zeros_like(instance_map, dtype=bool)
        rect[y0:y1, x0:x1] = True
        inside = instance_map[rect]
        inside = inside[inside > 0]
        if inside.size == 0:
            return np.zeros_like(instance_map, dtype=bool)
        instance = int(np.bincount(inside).argmax())
        return (instance_map == instance) & rect


def instance_box_prompt(instance_map: np.ndarray, instance_id: int):
    """Tight pixel bounding rectangle (x0, y0, x1, y1) of one instance."""
    ys, xs = np.nonzero(instance_map == instance_id)
    if len(xs) == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


# ---------------------------------------------------------------------------
# Remote adapters

def remote_call(desc: BackendDescriptor, meta: dict, parts: dict[str, bytes],
                client: httpx.Client | None = None) -> dict[str, bytes]:
    """POST a multipart request and parse the multipart response.

    Retries idempotently up to 2 times on transport failure; raises
    TransportError / TimeoutError / ProtocolError. Never partially applies
    a response: either the full parsed part map is returned or an error.
    """
    files = {"meta": ("meta.json", json.dumps(meta).encode(), "application/json")}
    for name, data in parts.items():
        files[name] = (f"{name}.png", data, "image/png")

    own_client = client is None
    client = client or httpx.Client(timeout=desc.timeout)
    last_exc: Exception | None = None
    try:
        for _ in range(3):  # first try + 2 retries
            try:
                resp = client.post(desc.endpoint, files=files, timeout=desc.timeout)
                break
            except httpx.TimeoutException as exc:
                last_exc = BackendTimeout(f"backend {desc.endpoint} timed out: {exc}")
            except httpx.TransportError as exc:
                last_exc = TransportError(f"backend {desc.endpoint} unreachable: {exc}")
        else:
            raise last_exc
        if resp.status_code != 200:
            raise ProtocolError(f"backend returned HTTP {resp.status_code}: {resp.text[:200]}")
        return _parse_multipart(resp.headers.get("content-type", ""), resp.content)
    finally:
        if own_client:
            client.close()


def _parse_multipart(content_type: str, body: bytes) -> dict[str, bytes]:
    if "multipart" not in content_type:
        raise ProtocolError(f"expected multipart response, got {content_type!r}")
    header = f"Content-Type: {content_type}\r\n\r\n".encode()
    msg = email.parser.BytesParser(policy=email.policy.HTTP).parsebytes(header + body)
    parts = {}
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if name:
            parts[name] = part.get_payload(decode=True)
    return parts


def _require_part(parts: dict[str, bytes], name: str) -> bytes:
    if name not in parts:
        raise ProtocolError(f"response missing part {name!r} (got {sorted(parts)})")
    return parts[name]


def _check_shape(arr: np.ndarray, expected: tuple, what: str) -> np.ndarray:
    if arr.shape[:len(expected)] != expected:
        raise ProtocolError(f"{what}: expected shape {expected}, got {arr.shape}")
    return arr


class RemoteGenerator:
    def __init__(self, desc: BackendDescriptor):
        self.desc = desc

    def _meta(self, req: GeneratorRequest) -> dict:
        return {
            "mode": req.mode,
            "prompt": req.prompt,
            "seed": req.seed,
            "views": len(req.semantics),
            "correspondences": req.correspondences or [],
        }

    def panorama(self, req: GeneratorRequest) -> list[np.ndarray]:
        parts = {}
        for k, (sem, dep) in enumerate(zip(req.semantics, req.near_depth)):
            parts[f"semantic_{k}"] = images.encode_labels(sem)
            parts[f"depth_{k}"] = images.encode_depth_mm(dep)
        out = remote_call(self.desc, self._meta(req), parts)
        res = req.semantics[0].shape
        views = []
        for k in range(len(req.semantics)):
            rgb = images.decode_rgb(_require_part(out, f"rgb_{k}"))
            views.append(_check_shape(rgb, res, f"rgb_{k}"))
        return views

    def inpaint(self, req: GeneratorRequest) -> np.ndarray:
        parts = {
            "semantic_0": images.encode_labels(req.semantics[0]),
            "depth_0": images.encode_depth_mm(req.near_depth[0]),
            "frame": images.encode_rgb(req.frame),
            "mask": images.encode_gray(np.asarray(req.mask, dtype=np.uint8) * 255),
        }
        out = remote_call(self.desc, self._meta(req), parts)
        rgb = images.decode_rgb(_require_part(out, "rgb_0"))
        return _check_shape(rgb, req.frame.shape[:2], "rgb_0")


class RemoteDepthEstimator:
    def __init__(self, desc: BackendDescriptor):
        self.desc = desc

    def estimate(self, rgb: np.ndarray, viewpoint: Viewpoint, seed: int = 0) -> DepthField:
        meta = {"mode": "depth", "seed": seed, "prompt": "", "views": 1,
                "correspondences": []}
        out = remote_call(self.desc, meta, {"frame": images.encode_rgb(rgb)})
        depth = images.decode_depth_mm(_require_part(out, "depth"))
        _check_shape(depth, rgb.shape[:2], "depth")
        return DepthField(np.maximum(depth, 0.05), viewpoint)


class RemoteMasker:
    def __init__(self, desc: BackendDescriptor):
        self.desc = desc

    def mask(self, rgb: np.ndarray, box_prompt, instance_map: np.ndarray) -> np.ndarray:
        meta = {"mode": "mask", "seed": 0, "prompt": "", "views": 1,
                "correspondences": [], "box": [int(v) for v in box_prompt]}
        out = remote_call(self.desc, meta, {"frame": images.encode_rgb(rgb)})
        mask = images.decode_labels(_require_part(out, "mask"))
        _check_shape(mask, rgb.shape[:2], "mask")
        return mask > 0


def mock_backends(room: ProxyRoom, depth_scale: float = 1.0, depth_shift: float = 0.0,
                  depth_noise: float = 0.0) -> Backends:
    """The standard consistent-world mock bundle for a proxy room."""
    return Backends(
        generator=MockGenerator(room.palette),
        depth=MockDepthEstimator(room, depth_scale, depth_shift, depth_noise),
        masker=MockMasker(),
    )
