"""Command-line surface: validate, run, render-controls, metrics, serve."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import images, render
from .config import load_config
from .errors import RoomforgeError
from .pipeline import STAGES, PipelineState, make_backends, run_stage
from .scene import Viewpoint, load_proxy


def _parse_view(spec: str, resolution: int) -> Viewpoint:
    parts = [float(p) for p in spec.split(",")]
    if len(parts) not in (4, 5):
        raise RoomforgeError('view must be "x,y,z,yaw[,pitch]" (yaw/pitch in degrees)')
    x, y, z, yaw = parts[:4]
    pitch = parts[4] if len(parts) == 5 else 0.0
    return Viewpoint((x, y, z), yaw=math.radians(yaw), pitch=math.radians(pitch),
                     fov_h=90.0, width=resolution, height=resolution)


def _find_config(args) -> "RoomforgeConfig":
    if getattr(args, "config", None):
        return load_config(args.config)
    project = getattr(args, "project", None)
    if project and (Path(project) / "roomforge.toml").exists():
        return load_config(Path(project) / "roomforge.toml")
    return load_config(Path("roomforge.toml"))


def cmd_validate(args) -> int:
    try:
        room = load_proxy(Path(args.proxy).read_bytes())
    except RoomforgeError as exc:
        print(f"INVALID: {exc}")
        return 1
    print(f"OK: {len(room.boxes)} boxes, {room.palette.count} classes, "
          f"prompt {room.style_prompt!r}")
    return 0


def cmd_run(args) -> int:
    config = _find_config(args).with_overrides(backend=args.backend)
    project = Path(args.project)
    state_file = project / "state.json"
    if state_file.exists():
        state = PipelineState.load(project)
        if args.seed is not None and args.seed != state.seed:
            state.seed = args.seed
            state.reset()
        if args.backend is not None:
            state.config = state.config.with_overrides(backend=args.backend)
    else:
        if not args.proxy:
            proxy_path = project / "proxy.json"
            if not proxy_path.exists():
                print("error: new project needs --proxy FILE", file=sys.stderr)
                return 2
        else:
            proxy_path = Path(args.proxy)
        state = PipelineState.create(project, proxy_path.read_bytes(),
                                     seed=args.seed or 0, config=config)
    backends = make_backends(state.room, state.config)
    run_stage(state, args.stage, backends)
    print(f"stage {args.stage!r} complete; {len(state.manifest)} artifacts in {project}")
    return 0


def cmd_render_controls(args) -> int:
    room = load_proxy(Path(args.proxy).read_bytes())
    v = _parse_view(args.view, args.resolution)
    cf = render.render_controls(room, v)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "semantic.png").write_bytes(images.encode_labels(cf.semantics, room.palette))
    (out / "instance.png").write_bytes(images.encode_labels(cf.instances))
    (out / "near.png").write_bytes(images.encode_depth_mm(cf.near_depth))
    (out / "far.png").write_bytes(images.encode_depth_mm(cf.far_depth))
    print(f"wrote 4 control maps to {out}")
    return 0


def cmd_metrics(args) -> int:
    path = Path(args.project) / "metrics.json"
    if not path.exists():
        print("error: metrics.json not found; run the complete stage first",
              file=sys.stderr)
        return 1
    print(path.read_text().strip())
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(args.data_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roomforge",
                                     description="Layout-conditioned room mesh generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a proxy-room file")
    p.add_argument("proxy")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run pipeline stages on a project")
    p.add_argument("--project", required=True)
    p.add_argument("--proxy", help="proxy file for a fresh project")
    p.add_argument("--stage", default="all", choices=(*STAGES, "all"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--backend", choices=("mock", "remote"), default=None)
    p.add_argument("--config", help="path to roomforge.toml")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("render-controls", help="render control maps for one viewpoint")
    p.add_argument("--proxy", required=True)
    p.add_argument("--view", required=True, help='"x,y,z,yaw[,pitch]" (degrees)')
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=512)
    p.set_defaults(func=cmd_render_controls)

    p = sub.add_parser("metrics", help="print a project's metrics report")
    p.add_argument("--project", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("serve", help="start the studio API server")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--data-dir", default="roomforge-data")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RoomforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
