"""HTTP facade for the studio: project CRUD, previews, jobs, artifacts."""

from __future__ import annotations

import json
import math
import threading
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import images, panorama, render
from .camera import ray_scale
from .config import RoomforgeConfig, config_from_dict
from .errors import (ParseError, PrerequisiteMissing, RoomforgeError, SchemaError,
                     ValidationError)
from .pipeline import STAGES, PipelineState, check_prerequisites, make_backends, run_stage
from .scene import Viewpoint, load_proxy, validate_viewpoint

_PREVIEW_RES = 512
_EQUIRECT_RES = 256


class Job:
    def __init__(self, project_id: str, stage: str, seed: int):
        self.id = uuid.uuid4().hex[:12]
        self.project_id = project_id
        self.stage = stage
        self.seed = seed
        self.status = "queued"
        self.progress = 0.0
        self.message = ""
        self.created = time.time()
        self.updated = time.time()

    def to_json(self) -> dict:
        return {
            "id": self.id, "project": self.project_id, "stage": self.stage,
            "status": self.status, "progress": round(self.progress, 4),
            "message": self.message, "created": self.created, "updated": self.updated,
        }


class ApiError(RoomforgeError):
    def __init__(self, status: int, code: str, detail: str):
        super().__init__(detail)
        self.status = status
        self.code = code
        self.detail = detail


class Studio:
    """Server state: projects on disk, jobs in memory."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.jobs: dict[str, Job] = {}
        self.lock = threading.Lock()

    # -- projects ------------------------------------------------------------

    def project_dir(self, project_id: str) -> Path:
        path = self.data_dir / project_id
        if not path.is_dir():
            raise ApiError(404, "not_found", f"unknown project {project_id!r}")
        return path

    def create_project(self, payload: dict) -> dict:
        project_id = uuid.uuid4().hex[:12]
        path = self.data_dir / project_id
        path.mkdir(parents=True)
        meta = {"name": payload.get("name", "untitled"),
                "seed": int(payload.get("seed", 0))}
        (path / "project.json").write_text(json.dumps(meta, indent=2))
        config = RoomforgeConfig()
        if payload.get("config"):
            config = config_from_dict(payload["config"])
        (path / "config.json").write_text(
            json.dumps(config.__dict__, indent=2, sort_keys=True))
        if payload.get("proxy"):
            self.put_proxy(project_id, payload["proxy"])
        return self.project_info(project_id)

    def _config(self, path: Path) -> RoomforgeConfig:
        cfg_file = path / "config.json"
        if cfg_file.exists():
            return RoomforgeConfig(**json.loads(cfg_file.read_text()))
        return RoomforgeConfig()

    def project_info(self, project_id: str) -> dict:
        path = self.project_dir(project_id)
        meta = json.loads((path / "project.json").read_text())
        info = {"id": project_id, "name": meta.get("name", ""),
                "seed": meta.get("seed", 0),
                "has_proxy": (path / "state.json").exists(),
                "stages": {s: False for s in STAGES}, "palette": []}
        if info["has_proxy"]:
            state = PipelineState.load(path)
            info["stages"] = dict(state.flags)
            info["palette"] = [
                {"id": cid, "name": name, "color": list(color)}
                for cid, name, color in state.room.palette.entries
            ]
        return info

    def running_job(self, project_id: str) -> Job | None:
        for job in self.jobs.values():
            if job.project_id == project_id and job.status in ("queued", "running"):
                return job
        return None

    def put_proxy(self, project_id: str, doc: dict) -> dict:
        path = self.project_dir(project_id)
        if self.running_job(project_id):
            raise ApiError(409, "busy", "a job is running; proxy is read-only")
        try:
            body = json.dumps(doc).encode()
            meta = json.loads((path / "project.json").read_text())
            PipelineState.create(path, body, seed=meta.get("seed", 0),
                                 config=self._config(path))
        except (ParseError, SchemaError, ValidationError) as exc:
            raise ApiError(422, "invalid_proxy", str(exc)) from exc
        return self.project_info(project_id)

    def get_proxy(self, project_id: str) -> dict:
        path = self.project_dir(project_id)
        proxy = path / "proxy.json"
        if not proxy.exists():
            raise ApiError(404, "not_found", "project has no proxy yet")
        return json.loads(proxy.read_text())

    # -- previews ------------------------------------------------------------

    def preview(self, project_id: str, view: str | None, kind: str):
        path = self.project_dir(project_id)
        if not (path / "state.json").exists():
            raise ApiError(409, "no_proxy", "upload a proxy before previewing")
        state = PipelineState.load(path)
        room = state.room
        if kind not in ("semantic", "instance", "near", "far"):
            raise ApiError(422, "bad_kind", f"unknown control kind {kind!r}")

        warnings: list[str] = []
        if view == "equirect":
            png = self._equirect_preview(state, kind)
        else:
            vp = self._parse_view(state, view)
            report = validate_viewpoint(room, vp)
            warnings = report.flags
            cf = render.render_controls(room, vp)
            png = self._encode_kind(cf, kind, room)
        return png, warnings

    def _parse_view(self, state: PipelineState, view: str | None) -> Viewpoint:
        if not view:
            x, y, z = state.pano_position
            return Viewpoint((x, y, z), yaw=0.0, fov_h=90.0,
                             width=_PREVIEW_RES, height=_PREVIEW_RES)
        try:
            parts = [float(p) for p in view.split(",")]
            x, y, z, yaw = parts[:4]
            pitch = parts[4] if len(parts) > 4 else 0.0
            return Viewpoint((x, y, z), yaw=math.radians(yaw),
                             pitch=math.radians(pitch), fov_h=90.0,
                             width=_PREVIEW_RES, height=_PREVIEW_RES)
        except (ValueError, IndexError, ValidationError) as exc:
            raise ApiError(422, "bad_view", f"invalid viewpoint {view!r}: {exc}") from exc

    def _encode_kind(self, cf, kind: str, room) -> bytes:
        if kind == "semantic":
            return images.encode_rgb(images.colorize_labels(cf.semantics, room.palette))
        if kind == "instance":
            return images.encode_rgb(images.colorize_labels(cf.instances, room.palette))
        depth = cf.near_depth if kind == "near" else cf.far_depth
        return images.encode_gray(images.depth_to_preview(depth))

    def _equirect_preview(self, state: PipelineState, kind: str) -> bytes:
        room = state.room
        fan = panorama.build_fan(state.pano_position, _EQUIRECT_RES)
        grid = panorama.PanoramaGrid(_EQUIRECT_RES, 2 * _EQUIRECT_RES)
        frames = [render.render_controls(room, v) for v in fan.views]
        if kind in ("semantic", "instance"):
            maps = [cf.semantics if kind == "semantic" else cf.instances for cf in frames]
            pano = panorama.mosaic_labels(maps, fan, grid)
            return images.encode_rgb(images.colorize_labels(pano, room.palette))
        maps = [(cf.near_depth if kind == "near" else cf.far_depth) * ray_scale(v)
                for cf, v in zip(frames, fan.views)]
        pano = panorama.fuse_distance_panorama(maps, fan, grid, levels=3)
        return images.encode_gray(images.depth_to_preview(pano))

    # -- jobs ------------------------------------------------------------

    def submit_job(self, project_id: str, stage: str, seed: int | None) -> Job:
        path = self.project_dir(project_id)
        if stage != "all" and stage not in STAGES:
            raise ApiError(422, "bad_stage", f"unknown stage {stage!r}")
        if not (path / "state.json").exists():
            raise ApiError(409, "no_proxy", "upload a proxy before running")
        with self.lock:
            if self.running_job(project_id):
                raise ApiError(409, "busy", "a job is already running for this project")
            state = PipelineState.load(path)
            if seed is not None and seed != state.seed:
                state.seed = seed
                state.reset()
                state.save()
            first = stage if stage != "all" else "controls"
            try:
                check_prerequisites(state, first)
            except PrerequisiteMissing as exc:
                raise ApiError(409, "prerequisite_missing", str(exc)) from exc
            job = Job(project_id, stage, state.seed)
            self.jobs[job.id] = job
        thread = threading.Thread(target=self._run_job, args=(job, path), daemon=True)
        thread.start()
        return job

    def _run_job(self, job: Job, path: Path) -> None:
        job.status = "running"
        job.updated = time.time()

        def progress(fraction: float) -> None:
            job.progress = max(job.progress, min(fraction, 1.0))
            job.updated = time.time()

        try:
            state = PipelineState.load(path)
            backends = make_backends(state.room, state.config)
            run_stage(state, job.stage, backends, progress=progress)
            job.progress = 1.0
            job.status = "done"
        except Exception as exc:  # stage-tagged failure surfaces to the client
            job.status = "failed"
            job.message = f"{type(exc).__name__}: {exc}"
        job.updated = time.time()

    def get_job(self, job_id: str) -> Job:
        if job_id not in self.jobs:
            raise ApiError(404, "not_found", f"unknown job {job_id!r}")
        return self.jobs[job_id]

    # -- artifacts ------------------------------------------------------------

    def artifact(self, project_id: str, rel_path: str) -> tuple[bytes, str]:
        path = self.project_dir(project_id)
        manifest_file = path / "manifest.json"
        if not manifest_file.exists():
            raise ApiError(404, "not_found", "project has no artifacts yet")
        manifest = json.loads(manifest_file.read_text())
        if rel_path not in manifest:
            raise ApiError(404, "not_found", f"artifact {rel_path!r} not in manifest")
        data = (path / rel_path).read_bytes()
        suffix = Path(rel_path).suffix
        media = {".png": "image/png", ".json": "application/json",
                 ".glb": "model/gltf-binary", ".jsonl": "application/jsonl",
                 ".csv": "text/csv", ".ply": "application/octet-stream"}
        return data, media.get(suffix, "application/octet-stream")


def create_app(data_dir) -> FastAPI:
    app = FastAPI(title="roomforge studio api")
    studio = Studio(data_dir)
    app.state.studio = studio

    @app.exception_handler(ApiError)
    async def handle_api_error(_req: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"error": exc.code, "detail": exc.detail})

    @app.exception_handler(RoomforgeError)
    async def handle_domain_error(_req: Request, exc: RoomforgeError):
        return JSONResponse(status_code=500,
                            content={"error": type(exc).__name__, "detail": str(exc)})

    @app.post("/projects")
    async def create_project(request: Request):
        payload = await request.json() if await request.body() else {}
        return studio.create_project(payload or {})

    @app.get("/projects/{project_id}")
    def get_project(project_id: str):
        return studio.project_info(project_id)

    @app.put("/projects/{project_id}/proxy")
    async def put_proxy(project_id: str, request: Request):
        doc = await request.json()
        return studio.put_proxy(project_id, doc)

    @app.get("/projects/{project_id}/proxy")
    def get_proxy(project_id: str):
        return studio.get_proxy(project_id)

    @app.get("/projects/{project_id}/controls")
    def get_controls(project_id: str, kind: str = "semantic", view: str | None = None):
        png, warnings = studio.preview(project_id, view, kind)
        headers = {}
        if warnings:
            headers["X-Roomforge-Warnings"] = "; ".join(warnings)
        return Response(content=png, media_type="image/png", headers=headers)

    @app.post("/projects/{project_id}/jobs")
    async def submit_job(project_id: str, request: Request):
        payload = await request.json()
        job = studio.submit_job(project_id, payload.get("stage", "all"),
                                payload.get("seed"))
        return job.to_json()

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        return studio.get_job(job_id).to_json()

    @app.get("/projects/{project_id}/artifacts/{rel_path:path}")
    def get_artifact(project_id: str, rel_path: str):
        data, media = studio.artifact(project_id, rel_path)
        return Response(content=data, media_type=media)

    return app
