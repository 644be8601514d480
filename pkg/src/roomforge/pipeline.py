"""Stage orchestration and project persistence.

A project directory holds proxy.json, per-stage artifact folders, a
manifest of content hashes, and state.json (stage flags, seed, config,
panorama viewpoint). Stages are idempotent: re-running with the same seed
reproduces identical artifact hashes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import camera, images, metrics as metrics_mod, panorama, render
from .align import align_depth, build_guidance, z_to_distance
from .backends import (Backends, BackendDescriptor, GeneratorRequest, RemoteDepthEstimator,
                       RemoteGenerator, RemoteMasker, mock_backends,
                       DEPTH_URL_ENV, GEN_URL_ENV, MASK_URL_ENV)
from .completion import (CompletionState, evaluation_views, global_hole_fraction,
                         run_completion, _object_masks)
from .config import RoomforgeConfig
from .errors import PrerequisiteMissing, RoomforgeError, ValidationError
from .meshing import FusionVolume, backproject_panorama, clean_mesh, extract_mesh
from .meshio import read_ply, write_glb, write_ply
from .scene import ProxyRoom, Viewpoint, load_proxy, point_in_box, serialize_proxy

STAGES = ("controls", "panorama", "align", "reconstruct", "clean", "complete")
EYE_HEIGHT = 1.5


def stage_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def pano_viewpoint(room: ProxyRoom) -> tuple[float, float, float]:
    """Deterministic panorama camera position: the floor centroid at eye
    height, nudged to the nearest clear grid spot when blocked."""
    cx, cz = room.shell.centroid_xz()
    height = min(EYE_HEIGHT, room.shell.height * 0.6)

    def clear(x, z):
        if not room.shell.contains_xz(x, z):
            return False
        p = (x, height, z)
        return not any(point_in_box(b, p, 0.1) for b in room.boxes)

    if clear(cx, cz):
        return (float(cx), height, float(cz))
    x0, z0, x1, z1 = room.shell.bounds_xz()
    candidates = []
    for x in np.arange(x0 + 0.25, x1, 0.25):
        for z in np.arange(z0 + 0.25, z1, 0.25):
            if clear(float(x), float(z)):
                candidates.append((float(x), float(z)))
    if not candidates:
        raise ValidationError("no clear panorama position inside the room")
    candidates.sort(key=lambda p: ((p[0] - cx) ** 2 + (p[1] - cz) ** 2, p))
    x, z = candidates[0]
    return (x, height, z)


class PipelineState:
    """Persistent pipeline run for one project directory."""

    def __init__(self, project_dir, room: ProxyRoom, seed: int = 0,
                 config: RoomforgeConfig | None = None):
        self.project_dir = Path(project_dir)
        self.room = room
        self.seed = int(seed)
        self.config = config or RoomforgeConfig()
        self.flags: dict[str, bool] = {s: False for s in STAGES}
        self.manifest: dict[str, str] = {}
        self.pano_position = pano_viewpoint(room)

    # -- persistence --------------------------------------------------------

    @classmethod
    def create(cls, project_dir, proxy_bytes: bytes, seed: int = 0,
               config: RoomforgeConfig | None = None) -> "PipelineState":
        room = load_proxy(proxy_bytes)
        state = cls(project_dir, room, seed, config)
        state.project_dir.mkdir(parents=True, exist_ok=True)
        state.write_artifact("proxy.json", serialize_proxy(room))
        state.save()
        return state

    @classmethod
    def load(cls, project_dir) -> "PipelineState":
        project_dir = Path(project_dir)
        doc = json.loads((project_dir / "state.json").read_text())
        room = load_proxy((project_dir / "proxy.json").read_bytes())
        state = cls(project_dir, room, doc["seed"],
                    RoomforgeConfig(**doc["config"]))
        state.flags = {s: bool(doc["stages"].get(s, False)) for s in STAGES}
        state.pano_position = tuple(doc["pano_position"])
        manifest_path = project_dir / "manifest.json"
        if manifest_path.exists():
            state.manifest = json.loads(manifest_path.read_text())
        return state

    def save(self) -> None:
        doc = {
            "seed": self.seed,
            "stages": self.flags,
            "pano_position": list(self.pano_position),
            "config": dataclasses.asdict(self.config),
        }
        _atomic_write(self.project_dir / "state.json",
                      json.dumps(doc, indent=2, sort_keys=True).encode())
        _atomic_write(self.project_dir / "manifest.json",
                      json.dumps(self.manifest, indent=2, sort_keys=True).encode())

    def write_artifact(self, rel_path: str, data: bytes) -> None:
        path = self.project_dir / rel_path
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, data)
        self.manifest[rel_path] = hashlib.sha256(data).hexdigest()

    def read_artifact(self, rel_path: str) -> bytes:
        return (self.project_dir / rel_path).read_bytes()

    def reset(self) -> None:
        self.flags = {s: False for s in STAGES}
        self.manifest = {k: v for k, v in self.manifest.items() if k == "proxy.json"}

    # -- helpers ------------------------------------------------------------

    def fan(self) -> panorama.ViewFan:
        return panorama.build_fan(self.pano_position, self.config.view_resolution)

    def pano_grid(self) -> panorama.PanoramaGrid:
        return panorama.PanoramaGrid(self.config.pano_height, 2 * self.config.pano_height)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@contextmanager
def project_lock(project_dir):
    """One pipeline run per project directory."""
    lock = Path(project_dir) / ".lock"
    lock.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RoomforgeError(f"project {project_dir} is locked by another run") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def make_backends(room: ProxyRoom, config: RoomforgeConfig) -> Backends:
    if config.backend == "mock":
        return mock_backends(room, config.mock_depth_scale, config.mock_depth_shift,
                             config.mock_depth_noise)
    if config.backend != "remote":
        raise ValidationError(f"unknown backend kind {config.backend!r}")
    def desc(env):
        url = os.environ.get(env, "")
        if not url:
            raise ValidationError(f"remote backend requires {env} to be set")
        return BackendDescriptor("remote", url, timeout=config.backend_timeout)
    backends = Backends(
        generator=RemoteGenerator(desc(GEN_URL_ENV)),
        depth=RemoteDepthEstimator(desc(DEPTH_URL_ENV)),
        masker=RemoteMasker(desc(MASK_URL_ENV)) if os.environ.get(MASK_URL_ENV)
        else mock_backends(room).masker,
    )
    return backends


# ---------------------------------------------------------------------------
# Stage implementations

def _noop_progress(_fraction: float) -> None:
    pass


def _stage_controls(state: PipelineState, backends: Backends, progress) -> None:
    room, cfg = state.room, state.config
    fan = state.fan()
    grid = state.pano_grid()
    sems, insts, dist_near, dist_far = [], [], [], []
    for k, v in enumerate(fan.views):
        cf = render.render_controls(room, v)
        state.write_artifact(f"controls/semantic_{k}.png",
                             images.encode_labels(cf.semantics, room.palette))
        state.write_artifact(f"controls/instance_{k}.png", images.encode_labels(cf.instances))
        state.write_artifact(f"controls/near_{k}.png", images.encode_depth_mm(cf.near_depth))
        state.write_artifact(f"controls/far_{k}.png", images.encode_depth_mm(cf.far_depth))
        sems.append(cf.semantics)
        insts.append(cf.instances)
        scale = camera.ray_scale(v)
        dist_near.append(cf.near_depth * scale)
        dist_far.append(cf.far_depth * scale)
        progress((k + 1) / 10)

    state.write_artifact("controls/semantic_pano.png",
                         images.encode_labels(panorama.mosaic_labels(sems, fan, grid),
                                              room.palette))
    state.write_artifact("controls/instance_pano.png",
                         images.encode_labels(panorama.mosaic_labels(insts, fan, grid)))
    levels = cfg.distance_pyramid_levels
    state.write_artifact("controls/distance_near_pano.png", images.encode_depth_mm(
        panorama.fuse_distance_panorama(dist_near, fan, grid, levels)))
    state.write_artifact("controls/distance_far_pano.png", images.encode_depth_mm(
        panorama.fuse_distance_panorama(dist_far, fan, grid, levels)))
    state.write_artifact("controls/correspondences.json",
                         panorama.export_correspondences(fan).encode())
    state.write_artifact("controls/fan.json", json.dumps({
        "position": list(state.pano_position),
        "resolution": cfg.view_resolution,
        "views": [{"yaw": v.yaw} for v in fan.views],
    }, indent=2).encode())
    progress(1.0)


def _stage_panorama(state: PipelineState, backends: Backends, progress) -> None:
    cfg = state.config
    fan = state.fan()
    sems = [images.decode_labels(state.read_artifact(f"controls/semantic_{k}.png"))
            for k in range(8)]
    nears = [images.decode_depth_mm(state.read_artifact(f"controls/near_{k}.png"))
             for k in range(8)]
    correspondences = json.loads(state.read_artifact("controls/correspondences.json"))
    req = GeneratorRequest(
        mode="panorama", semantics=sems, near_depth=nears,
        prompt=state.room.style_prompt, seed=stage_seed(state.seed, "panorama"),
        correspondences=correspondences,
    )
    views = backends.generator.panorama(req)
    progress(0.7)
    for k, rgb in enumerate(views):
        state.write_artifact(f"panorama/rgb_{k}.png", images.encode_rgb(rgb))
    pano = panorama.views_to_equirect([v.astype(np.float32) for v in views],
                                      fan, state.pano_grid(), cfg.pyramid_levels)
    state.write_artifact("panorama/panorama.png",
                         images.encode_rgb(np.clip(np.rint(pano), 0, 255).astype(np.uint8)))
    progress(1.0)


def _stage_align(state: PipelineState, backends: Backends, progress) -> None:
    cfg = state.config
    fan = state.fan()
    align_cfg = cfg.align_config()
    seed = stage_seed(state.seed, "align")
    dist_views = []
    for k, v in enumerate(fan.views):
        rgb = images.decode_rgb(state.read_artifact(f"panorama/rgb_{k}.png"))
        init = backends.depth.estimate(rgb, v, seed=seed + k)
        cf = render.render_controls(state.room, v)
        masks = _object_masks(cf, backends.masker, rgb)
        guidance = build_guidance(cf, masks)
        aligned, trajectory = align_depth(init, guidance, align_cfg)
        state.write_artifact(f"depth/aligned_{k}.png",
                             images.encode_depth_mm(aligned.values))
        rows = ["step,loss_depth,loss_normal,loss_total"]
        rows += [f"{i},{ld!r},{ln!r},{lt!r}" for i, (ld, ln, lt) in enumerate(trajectory)]
        state.write_artifact(f"depth/trajectory_{k}.csv", ("\n".join(rows) + "\n").encode())
        dist_views.append(z_to_distance(aligned))
        progress((k + 1) / 9)
    grid = state.pano_grid()
    fused = panorama.fuse_distance_panorama(dist_views, fan, grid,
                                            cfg.distance_pyramid_levels)
    # polar caps are never observed by the fan; mark them invalid so the
    # reconstruction skips them and completion fills those regions later
    covered = panorama.fan_coverage(fan, grid)
    state.write_artifact("depth/distance_pano.png",
                         images.encode_depth_mm(fused, valid=covered))
    progress(1.0)


def _make_volume(state: PipelineState) -> FusionVolume:
    cfg = state.config
    vol = FusionVolume.for_shell(state.room.shell, cfg.voxel_size, cfg.truncation_voxels)
    rgb = images.decode_rgb(state.read_artifact("panorama/panorama.png"))
    dist = images.decode_depth_mm(state.read_artifact("depth/distance_pano.png"))
    inst = images.decode_labels(state.read_artifact("controls/instance_pano.png"))
    points = backproject_panorama(rgb, dist, state.pano_position, instances=inst)
    vol.integrate(points)
    return vol


def _stage_reconstruct(state: PipelineState, backends: Backends, progress) -> None:
    vol = _make_volume(state)
    progress(0.6)
    mesh = extract_mesh(vol)
    buf = _ply_bytes(mesh)
    state.write_artifact("mesh/density.ply", buf)
    progress(1.0)


def _stage_clean(state: PipelineState, backends: Backends, progress) -> None:
    cfg = state.config
    mesh = read_ply(state.project_dir / "mesh/density.ply")
    cleaned = clean_mesh(mesh, cfg.density_threshold, cfg.component_threshold)
    state.write_artifact("mesh/scene.ply", _ply_bytes(cleaned))
    state.write_artifact("mesh/scene.glb", _glb_bytes(cleaned))
    progress(1.0)


def _stage_complete(state: PipelineState, backends: Backends, progress) -> None:
    cfg = state.config
    mesh = read_ply(state.project_dir / "mesh/scene.ply")
    vol = _make_volume(state)
    comp_cfg = cfg.completion_config()

    def sink(name: str, payload: dict) -> str:
        state.write_artifact(f"steps/{name}_frame.png", images.encode_rgb(payload["frame"]))
        state.write_artifact(f"steps/{name}_mask.png", images.encode_gray(
            payload["mask"].astype(np.uint8) * 255))
        state.write_artifact(f"steps/{name}_semantic.png", images.encode_labels(
            payload["semantics"], state.room.palette))
        state.write_artifact(f"steps/{name}_aligned.png", images.encode_depth_mm(
            payload["aligned_depth"]))
        rows = ["step,loss_depth,loss_normal,loss_total"]
        rows += [f"{i},{ld!r},{ln!r},{lt!r}"
                 for i, (ld, ln, lt) in enumerate(payload["trajectory"])]
        state.write_artifact(f"steps/{name}_trajectory.csv", ("\n".join(rows) + "\n").encode())
        payload["step"].trajectory_ref = f"steps/{name}_trajectory.csv"
        return f"steps/{name}_frame.png"

    comp = CompletionState(
        room=state.room, volume=vol, mesh=mesh, pano_position=state.pano_position,
        seed=stage_seed(state.seed, "complete") % (2**31),
        align_config=cfg.align_config(), artifact_sink=sink,
    )
    comp = run_completion(comp, backends, comp_cfg)
    progress(0.9)

    log_lines = [json.dumps(s.to_json(), sort_keys=True) for s in comp.steps]
    state.write_artifact("steps/log.jsonl", ("\n".join(log_lines) + "\n").encode()
                         if log_lines else b"")
    state.write_artifact("mesh/final.ply", _ply_bytes(comp.mesh))
    state.write_artifact("mesh/final.glb", _glb_bytes(comp.mesh))

    hole = global_hole_fraction(comp.mesh, evaluation_views(comp, comp_cfg))
    report = metrics_mod.evaluate(comp.mesh, state.room, hole,
                                  inflate=cfg.pa_inflate, samples=cfg.coverage_samples)
    state.write_artifact("metrics.json",
                         json.dumps(report.to_json(), indent=2, sort_keys=True).encode())
    progress(1.0)


def _ply_bytes(mesh) -> bytes:
    import tempfile

    with tempfile.TemporaryDirectory() as td:
        p = Path(td) / "m.ply"
        write_ply(p, mesh)
        return p.read_bytes()


def _glb_bytes(mesh) -> bytes:
    import tempfile

    with tempfile.TemporaryDirectory() as td:
        p = Path(td) / "m.glb"
        write_glb(p, mesh)
        return p.read_bytes()


_STAGE_FUNCS = {
    "controls": _stage_controls,
    "panorama": _stage_panorama,
    "align": _stage_align,
    "reconstruct": _stage_reconstruct,
    "clean": _stage_clean,
    "complete": _stage_complete,
}


def check_prerequisites(state: PipelineState, stage: str) -> None:
    idx = STAGES.index(stage)
    for earlier in STAGES[:idx]:
        if not state.flags[earlier]:
            raise PrerequisiteMissing(f"stage {stage!r} requires {earlier!r} first")


def run_stage(state: PipelineState, stage: str, backends: Backends | None = None,
              progress=None) -> PipelineState:
    """Execute one stage (or "all"); artifacts and manifest update atomically."""
    progress = progress or _noop_progress
    backends = backends or make_backends(state.room, state.config)
    stages = list(STAGES) if stage == "all" else [stage]
    if stage != "all" and stage not in _STAGE_FUNCS:
        raise ValidationError(f"unknown stage {stage!r}")
    with project_lock(state.project_dir):
        for i, name in enumerate(stages):
            check_prerequisites(state, name)
            base = i / len(stages)
            span = 1.0 / len(stages)
            _STAGE_FUNCS[name](state, backends,
                               lambda f: progress(base + span * min(max(f, 0.0), 1.0)))
            state.flags[name] = True
            state.save()
    return state
