"""Mesh serialization: binary PLY (with density/instance extras) and GLB."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .meshing import DensityMesh, SceneMesh


def write_ply(path, mesh: SceneMesh) -> None:
    """Binary little-endian PLY: float32 positions, uint8 colors.

    DensityMesh adds a float32 "density" property; instance provenance is
    stored as an int32 "instance_id" property when present.
    """
    path = Path(path)
    has_density = isinstance(mesh, DensityMesh)
    has_instances = mesh.instances is not None

    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
              ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    props = ["property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if has_density:
        fields.append(("density", "<f4"))
        props.append("property float density")
    if has_instances:
        fields.append(("instance_id", "<i4"))
        props.append("property int instance_id")

    vdata = np.zeros(len(mesh.vertices), dtype=fields)
    vdata["x"], vdata["y"], vdata["z"] = mesh.vertices.astype(np.float32).T
    vdata["red"], vdata["green"], vdata["blue"] = mesh.colors.T
    if has_density:
        vdata["density"] = mesh.densities
    if has_instances:
        vdata["instance_id"] = mesh.instances

    fdata = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    fdata["n"] = 3
    fdata["idx"] = mesh.triangles

    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(mesh.vertices)}",
        *props,
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vdata.tobytes())
        fh.write(fdata.tobytes())


def read_ply(path) -> SceneMesh:
    """Read meshes written by write_ply (our dialect only)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a roomforge PLY file")
    header = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n"):]

    n_vert = n_face = 0
    fields: list[tuple[str, str]] = []
    in_vertex = False
    type_map = {"float": "<f4", "uchar": "u1", "int": "<i4"}
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert, in_vertex = int(parts[2]), True
        elif parts[:2] == ["element", "face"]:
            n_face, in_vertex = int(parts[2]), False
        elif parts[0] == "property" and in_vertex:
            fields.append((parts[2], type_map[parts[1]]))

    vdtype = np.dtype(fields)
    vdata = np.frombuffer(body, dtype=vdtype, count=n_vert)
    fdata = np.frombuffer(body[n_vert * vdtype.itemsize:],
                          dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=n_face)

    verts = np.stack([vdata["x"], vdata["y"], vdata["z"]], axis=1).astype(np.float64)
    colors = np.stack([vdata["red"], vdata["green"], vdata["blue"]], axis=1)
    names = vdtype.names
    instances = vdata["instance_id"].astype(np.int32).copy() if "instance_id" in names else None
    tris = fdata["idx"].astype(np.int32).copy()
    if "density" in names:
        return DensityMesh(verts, colors, tris, instances=instances,
                           densities=vdata["density"].astype(np.float32).copy())
    return SceneMesh(verts, colors, tris, instances=instances)


def write_glb(path, mesh: SceneMesh) -> None:
    """Minimal glTF 2.0 binary with POSITION / COLOR_0 / indices."""
    positions = np.ascontiguousarray(mesh.vertices, dtype=np.float32)
    colors = np.ascontiguousarray(mesh.colors, dtype=np.uint8)
    indices = np.ascontiguousarray(mesh.triangles.reshape(-1), dtype=np.uint32)

    def pad4(b: bytes, fill: bytes = b"\x00") -> bytes:
        return b + fill * (-len(b) % 4)

    pos_bytes = pad4(positions.tobytes())
    col_bytes = pad4(np.concatenate([colors, np.full((len(colors), 1), 255, np.uint8)],
                                    axis=1).tobytes())
    idx_bytes = pad4(indices.tobytes())
    bin_chunk = pos_bytes + col_bytes + idx_bytes

    n = len(positions)
    doc = {
        "asset": {"version": "2.0", "generator": "roomforge"},
        "scene": 0,
        "scenes": [{"nodes": [0]}],
        "nodes": [{"mesh": 0}],
        "meshes": [{
            "primitives": [{
                "attributes": {"POSITION": 0, "COLOR_0": 1},
                "indices": 2,
                "mode": 4,
            }]
        }],
        "accessors": [
            {
                "bufferView": 0, "componentType": 5126, "count": n, "type": "VEC3",
                "min": [float(x) for x in positions.min(axis=0)] if n else [0, 0, 0],
                "max": [float(x) for x in positions.max(axis=0)] if n else [0, 0, 0],
            },
            {"bufferView": 1, "componentType": 5121, "count": n, "type": "VEC4",
             "normalized": True},
            {"bufferView": 2, "componentType": 5125, "count": len(indices),
             "type": "SCALAR"},
        ],
        "bufferViews": [
            {"buffer": 0, "byteOffset": 0, "byteLength": len(pos_bytes), "target": 34962},
            {"buffer": 0, "byteOffset": len(pos_bytes), "byteLength": len(col_bytes),
             "target": 34962},
            {"buffer": 0, "byteOffset": len(pos_bytes) + len(col_bytes),
             "byteLength": len(idx_bytes), "target": 34963},
        ],
        "buffers": [{"byteLength": len(bin_chunk)}],
    }
    json_chunk = pad4(json.dumps(doc, separators=(",", ":"), sort_keys=True).encode(), b" ")

    total = 12 + 8 + len(json_chunk) + 8 + len(bin_chunk)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", b"glTF", 2, total))
        fh.write(struct.pack("<I4s", len(json_chunk), b"JSON"))
        fh.write(json_chunk)
        fh.write(struct.pack("<I4s", len(bin_chunk), b"BIN\x00"))
        fh.write(bin_chunk)
