"""Proxy room model: semantic boxes, room shell, palette, cameras, file I/O.

Coordinate system is right-handed, y-up, meters. The floor sits at y=0 and
the ceiling at y=height. Walls are the vertical extrusion of the floor
polygon. Boxes are axis-aligned.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import ParseError, SchemaError, ValidationError

# Reserved surface classes every palette must define.
RESERVED_CLASSES = ("wall", "floor", "ceiling")


@dataclass(frozen=True)
class SemanticBox:
    """Axis-aligned semantic bounding box (center/size, meters)."""

    instance_id: int
    class_id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        if self.instance_id <= 0:
            raise ValidationError(f"box instance_id must be positive, got {self.instance_id}")
        for axis, extent in zip("xyz", self.size):
            if not extent > 0:
                raise ValidationError(
                    f"box {self.instance_id}: size.{axis} must be > 0, got {extent}"
                )

    @property
    def min_corner(self) -> tuple[float, float, float]:
        return tuple(c - s / 2.0 for c, s in zip(self.center, self.size))

    @property
    def max_corner(self) -> tuple[float, float, float]:
        return tuple(c + s / 2.0 for c, s in zip(self.center, self.size))


@dataclass(frozen=True)
class RoomShell:
    """Vertical prism over a simple floor polygon; floor y=0, ceiling y=height."""

    floor_polygon: tuple[tuple[float, float], ...]  # (x, z) pairs
    height: float

    def __post_init__(self):
        if len(self.floor_polygon) < 3:
            raise ValidationError("floor_polygon needs at least 3 points")
        if not self.height > 0:
            raise ValidationError(f"shell height must be > 0, got {self.height}")
        if abs(_polygon_area(self.floor_polygon)) < 1e-12:
            raise ValidationError("floor_polygon is degenerate (zero area)")
        if _polygon_self_intersects(self.floor_polygon):
            raise ValidationError("floor_polygon is self-intersecting")

    def bounds_xz(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.floor_polygon]
        zs = [p[1] for p in self.floor_polygon]
        return min(xs), min(zs), max(xs), max(zs)

    def contains_xz(self, x: float, z: float) -> bool:
        return _point_in_polygon(self.floor_polygon, x, z)

    def centroid_xz(self) -> tuple[float, float]:
        pts = self.floor_polygon
        area2 = 0.0
        cx = cz = 0.0
        for (x0, z0), (x1, z1) in zip(pts, pts[1:] + pts[:1]):
            cross = x0 * z1 - x1 * z0
            area2 += cross
            cx += (x0 + x1) * cross
            cz += (z0 + z1) * cross
        if abs(area2) < 1e-12:
            return pts[0]
        return cx / (3.0 * area2), cz / (3.0 * area2)


@dataclass(frozen=True)
class SemanticPalette:
    """Dense class table: id -> (name, display color), ids 1..count."""

    entries: tuple[tuple[int, str, tuple[int, int, int]], ...]

    def __post_init__(self):
        ids = sorted(e[0] for e in self.entries)
        if ids != list(range(1, len(ids) + 1)):
            raise ValidationError(f"palette class ids must be dense in [1, C], got {ids}")
        names = [e[1] for e in self.entries]
        if len(set(names)) != len(names):
            raise ValidationError("palette class names must be unique")
        for reserved in RESERVED_CLASSES:
            if reserved not in names:
                raise ValidationError(f"palette missing reserved class {reserved!r}")

    @property
    def count(self) -> int:
        return len(self.entries)

    def id_of(self, name: str) -> int:
        for cid, cname, _ in self.entries:
            if cname == name:
                return cid
        raise KeyError(name)

    def name_of(self, class_id: int) -> str:
        for cid, cname, _ in self.entries:
            if cid == class_id:
                return cname
        raise KeyError(class_id)

    def color_of(self, class_id: int) -> tuple[int, int, int]:
        for cid, _, color in self.entries:
            if cid == class_id:
                return color
        raise KeyError(class_id)

    @property
    def wall_id(self) -> int:
        return self.id_of("wall")

    @property
    def floor_id(self) -> int:
        return self.id_of("floor")

    @property
    def ceiling_id(self) -> int:
        return self.id_of("ceiling")


@dataclass(frozen=True)
class Viewpoint:
    """Perspective camera: position + yaw/pitch/roll (radians) + horizontal FOV."""

    position: tuple[float, float, float]
    yaw: float
    pitch: float = 0.0
    roll: float = 0.0
    fov_h: float = 90.0  # degrees
    width: int = 512
    height: int = 512

    def __post_init__(self):
        if not 0.0 < self.fov_h < 179.0:
            raise ValidationError(f"fov_h must be in (0, 179) degrees, got {self.fov_h}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"resolution must be positive, got {self.width}x{self.height}")

    @property
    def focal(self) -> float:
        """Focal length in pixels: f = (width/2) / tan(fov_h/2)."""
        return (self.width / 2.0) / math.tan(math.radians(self.fov_h) / 2.0)

    def resized(self, width: int, height: int) -> "Viewpoint":
        return Viewpoint(self.position, self.yaw, self.pitch, self.roll,
                         self.fov_h, width, height)


@dataclass(frozen=True)
class ProxyRoom:
    """User-authored layout: shell + semantic boxes + style prompt."""

    shell: RoomShell
    boxes: tuple[SemanticBox, ...]
    palette: SemanticPalette
    style_prompt: str

    def __post_init__(self):
        if not self.style_prompt:
            raise ValidationError("style_prompt must be non-empty")
        seen: dict[int, int] = {}
        for box in self.boxes:
            if box.instance_id in seen:
                raise ValidationError(f"duplicate instance id {box.instance_id}")
            seen[box.instance_id] = box.class_id
            try:
                self.palette.name_of(box.class_id)
            except KeyError:
                raise ValidationError(
                    f"box {box.instance_id} references unknown class id {box.class_id}"
                ) from None
            if not _box_intersects_shell(box, self.shell):
                raise ValidationError(
                    f"box {box.instance_id} does not intersect the room shell interior"
                )

    def box_by_instance(self, instance_id: int) -> SemanticBox:
        for box in self.boxes:
            if box.instance_id == instance_id:
                return box
        raise KeyError(instance_id)


# ---------------------------------------------------------------------------
# Geometry helpers (scalar; the renderer has its own vectorized versions)

def _polygon_area(pts) -> float:
    area = 0.0
    for (x0, z0), (x1, z1) in zip(pts, tuple(pts[1:]) + (pts[0],)):
        area += x0 * z1 - x1 * z0
    return area / 2.0


def _segments_intersect(p, q, r, s) -> bool:
    """Proper intersection of open segments pq and rs."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    o1, o2 = orient(p, q, r), orient(p, q, s)
    o3, o4 = orient(r, s, p), orient(r, s, q)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def _polygon_self_intersects(pts) -> bool:
    n = len(pts)
    edges = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex
            if _segments_intersect(*edges[i], *edges[j]):
                return True
    return False


def _point_in_polygon(pts, x: float, z: float) -> bool:
    """Even-odd crossing test."""
    inside = False
    n = len(pts)
    for i in range(n):
        x0, z0 = pts[i]
        x1, z1 = pts[(i + 1) % n]
        if (z0 > z) != (z1 > z):
            t = (z - z0) / (z1 - z0)
            if x < x0 + t * (x1 - x0):
                inside = not inside
    return inside


def _box_intersects_shell(box: SemanticBox, shell: RoomShell) -> bool:
    y_lo = box.center[1] - box.size[1] / 2.0
    y_hi = box.center[1] + box.size[1] / 2.0
    if y_lo >= shell.height or y_hi <= 0.0:
        return False
    x_lo, _, z_lo = box.min_corner
    x_hi, _, z_hi = box.max_corner
    corners = [(x_lo, z_lo), (x_lo, z_hi), (x_hi, z_lo), (x_hi, z_hi)]
    if any(_point_in_polygon(shell.floor_polygon, cx, cz) for cx, cz in corners):
        return True
    if any(x_lo <= px <= x_hi and z_lo <= pz <= z_hi for px, pz in shell.floor_polygon):
        return True
    rect_edges = [
        ((x_lo, z_lo), (x_hi, z_lo)), ((x_hi, z_lo), (x_hi, z_hi)),
        ((x_hi, z_hi), (x_lo, z_hi)), ((x_lo, z_hi), (x_lo, z_lo)),
    ]
    n = len(shell.floor_polygon)
    for i in range(n):
        edge = (shell.floor_polygon[i], shell.floor_polygon[(i + 1) % n])
        for rect_edge in rect_edges:
            if _segments_intersect(*edge, *rect_edge):
                return True
    return False


# ---------------------------------------------------------------------------
# Operations

def point_in_box(box: SemanticBox, point, inflate: float = 0.0) -> bool:
    """True iff point lies in the closed box inflated by `inflate` per side."""
    return all(
        abs(p - c) <= s / 2.0 + inflate
        for p, c, s in zip(point, box.center, box.size)
    )


_SCHEMA_TOP = {"style_prompt", "shell", "palette", "boxes"}
_SCHEMA_SHELL = {"floor_polygon", "height"}
_SCHEMA_PALETTE = {"id", "name", "color"}
_SCHEMA_BOX = {"instance_id", "class", "center", "size"}


def _check_keys(obj: dict, expected: set, where: str) -> None:
    missing = expected - obj.keys()
    extra = obj.keys() - expected
    if missing:
        raise SchemaError(f"{where}: missing fields {sorted(missing)}")
    if extra:
        raise SchemaError(f"{where}: unknown fields {sorted(extra)}")


def _as_vec(value, n: int, where: str) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise SchemaError(f"{where}: expected a {n}-vector, got {value!r}")
    for v in value:
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise SchemaError(f"{where}: expected numbers, got {value!r}")
    return tuple(float(v) for v in value)


def load_proxy(data: bytes | str) -> ProxyRoom:
    """Parse and validate a proxy-room JSON document."""
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"proxy file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("proxy document must be a JSON object")
    _check_keys(doc, _SCHEMA_TOP, "proxy")

    prompt = doc["style_prompt"]
    if not isinstance(prompt, str):
        raise SchemaError("style_prompt must be a string")

    shell_doc = doc["shell"]
    if not isinstance(shell_doc, dict):
        raise SchemaError("shell must be an object")
    _check_keys(shell_doc, _SCHEMA_SHELL, "shell")
    poly_doc = shell_doc["floor_polygon"]
    if not isinstance(poly_doc, list):
        raise SchemaError("shell.floor_polygon must be a list of [x, z] pairs")
    polygon = tuple(_as_vec(p, 2, "shell.floor_polygon point") for p in poly_doc)
    height = shell_doc["height"]
    if not isinstance(height, (int, float)) or isinstance(height, bool):
        raise SchemaError("shell.height must be a number")
    shell = RoomShell(polygon, float(height))

    palette_doc = doc["palette"]
    if not isinstance(palette_doc, list):
        raise SchemaError("palette must be a list")
    entries = []
    for entry in palette_doc:
        if not isinstance(entry, dict):
            raise SchemaError("palette entries must be objects")
        _check_keys(entry, _SCHEMA_PALETTE, "palette entry")
        if not isinstance(entry["id"], int) or isinstance(entry["id"], bool):
            raise SchemaError(f"palette id must be an integer, got {entry['id']!r}")
        if not isinstance(entry["name"], str):
            raise SchemaError("palette name must be a string")
        color = _as_vec(entry["color"], 3, f"palette {entry['name']!r} color")
        color_i = tuple(int(c) for c in color)
        if any(not 0 <= c <= 255 for c in color_i):
            raise ValidationError(f"palette {entry['name']!r}: color components must be 0..255")
        entries.append((entry["id"], entry["name"], color_i))
    palette = SemanticPalette(tuple(entries))

    boxes_doc = doc["boxes"]
    if not isinstance(boxes_doc, list):
        raise SchemaError("boxes must be a list")
    boxes = []
    for box_doc in boxes_doc:
        if not isinstance(box_doc, dict):
            raise SchemaError("box entries must be objects")
        _check_keys(box_doc, _SCHEMA_BOX, "box")
        iid = box_doc["instance_id"]
        if not isinstance(iid, int) or isinstance(iid, bool):
            raise SchemaError(f"box instance_id must be an integer, got {iid!r}")
        cls = box_doc["class"]
        if isinstance(cls, str):
            try:
                class_id = palette.id_of(cls)
            except KeyError:
                raise ValidationError(f"box {iid} references unknown class {cls!r}") from None
        elif isinstance(cls, int) and not isinstance(cls, bool):
            class_id = cls
        else:
            raise SchemaError(f"box class must be a string or integer, got {cls!r}")
        center = _as_vec(box_doc["center"], 3, f"box {iid} center")
        size = _as_vec(box_doc["size"], 3, f"box {iid} size")
        boxes.append(SemanticBox(iid, class_id, center, size))

    return ProxyRoom(shell=shell, boxes=tuple(boxes), palette=palette, style_prompt=prompt)


def serialize_proxy(room: ProxyRoom) -> bytes:
    """Canonical JSON encoding; load_proxy(serialize_proxy(r)) == r."""
    doc = {
        "style_prompt": room.style_prompt,
        "shell": {
            "floor_polygon": [list(p) for p in room.shell.floor_polygon],
            "height": room.shell.height,
        },
        "palette": [
            {"id": cid, "name": name, "color": list(color)}
            for cid, name, color in room.palette.entries
        ],
        "boxes": [
            {
                "instance_id": b.instance_id,
                "class": room.palette.name_of(b.class_id),
                "center": list(b.center),
                "size": list(b.size),
            }
            for b in room.boxes
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=False).encode("utf-8")


# ---------------------------------------------------------------------------
# Viewpoint quality checks

@dataclass(frozen=True)
class ViewLimits:
    """Quality thresholds for candidate viewpoints."""

    max_roll: float = math.radians(8.6)
    max_depth: float = 15.0  # meters
    max_class_fraction: float = 0.5
    probe_resolution: int = 64


@dataclass
class ValidationReport:
    flags: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flags

    def add(self, flag: str) -> None:
        self.flags.append(flag)


def validate_viewpoint(room: ProxyRoom, v: Viewpoint, limits: ViewLimits | None = None) -> ValidationReport:
    """Flag viewpoints that would produce poor control maps.

    Checks: excessive roll, camera inside a box or outside the shell,
    a single class covering more than half the probe render, and rendered
    depth beyond the indoor cap.
    """
    from . import render  # deferred: render depends on scene

    limits = limits or ViewLimits()
    report = ValidationReport()

    if abs(v.roll) > limits.max_roll:
        report.add(f"excessive roll: |{math.degrees(v.roll):.1f}| deg "
                   f"> {math.degrees(limits.max_roll):.1f} deg")

    x, y, z = v.position
    if not (0.0 < y < room.shell.height) or not room.shell.contains_xz(x, z):
        report.add("camera outside shell")
    for box in room.boxes:
        if point_in_box(box, v.position):
            report.add(f"camera inside object (box {box.instance_id})")
            break

    if "camera outside shell" not in report.flags:
        probe = v.resized(limits.probe_resolution, limits.probe_resolution)
        try:
            frames = render.render_controls(room, probe)
        except CameraOutsideSceneGuard:
            return report
        total = frames.semantics.size
        # shell classes legitimately dominate empty rooms; the coverage rule
        # guards against object close-ups, so only box classes count
        object_classes = {b.class_id for b in room.boxes}
        counts = _bincount(frames.semantics)
        for class_id, count in counts.items():
            if class_id in object_classes and count > limits.max_class_fraction * total:
                report.add(
                    f"class {room.palette.name_of(class_id)!r} covers "
                    f"{count / total:.0%} of the view (limit {limits.max_class_fraction:.0%})"
                )
        if float(frames.far_depth.max()) > limits.max_depth:
            report.add(f"max rendered depth {float(frames.far_depth.max()):.1f} m "
                       f"> {limits.max_depth:.1f} m")
    return report


def _bincount(label_map) -> dict[int, int]:
    import numpy as np

    ids, counts = np.unique(label_map, return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}


# validate_viewpoint tolerates a misplaced probe camera instead of raising.
from .errors import CameraOutsideScene as CameraOutsideSceneGuard  # noqa: E402
