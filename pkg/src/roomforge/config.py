"""Run configuration: defaults, roomforge.toml loading, CLI overrides."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .align import AlignConfig
from .completion import CompletionConfig
from .errors import ParseError


@dataclass
class RoomforgeConfig:
    # rendering / panorama
    view_resolution: int = 512
    pano_height: int = 1024
    pyramid_levels: int = 5
    distance_pyramid_levels: int = 2
    # alignment
    align_steps: int = 600
    align_step_size: float = 2e-3
    normal_weight: float = 0.5
    bound_tolerance: float = 0.01
    prefit_scale_shift: bool = True
    # fusion / cleaning
    voxel_size: float = 0.025
    truncation_voxels: float = 4.0
    density_threshold: float = 3.0
    component_threshold: int = 200
    # completion
    max_viewpoints: int = 20
    grid_spacing: float = 1.0
    small_hole_radius: int = 4
    erosion_radius: int = 2
    dilation_radius: int = 6
    stop_threshold: float = 0.01
    completion_resolution: int = 512
    score_resolution: int = 64
    eval_resolution: int = 128
    # metrics
    pa_inflate: float = 0.05
    coverage_samples: int = 10000
    # backends
    backend: str = "mock"  # mock | remote
    mock_depth_scale: float = 1.2
    mock_depth_shift: float = 0.2
    mock_depth_noise: float = 0.02
    backend_timeout: float = 120.0

    def align_config(self) -> AlignConfig:
        return AlignConfig(
            steps=self.align_steps,
            step_size=self.align_step_size,
            normal_weight=self.normal_weight,
            tolerance=self.bound_tolerance,
            prefit_scale_shift=self.prefit_scale_shift,
        )

    def completion_config(self) -> CompletionConfig:
        return CompletionConfig(
            max_viewpoints=self.max_viewpoints,
            grid_spacing=self.grid_spacing,
            small_hole_radius=self.small_hole_radius,
            erosion_radius=self.erosion_radius,
            dilation_radius=self.dilation_radius,
            stop_threshold=self.stop_threshold,
            view_resolution=self.completion_resolution,
            score_resolution=self.score_resolution,
            eval_resolution=self.eval_resolution,
            density_threshold=self.density_threshold,
            component_threshold=self.component_threshold,
        )

    def with_overrides(self, **overrides) -> "RoomforgeConfig":
        values = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **values)


def load_config(path=None) -> RoomforgeConfig:
    """Read roomforge.toml if present; unknown keys are rejected."""
    if path is None:
        return RoomforgeConfig()
    path = Path(path)
    if not path.exists():
        return RoomforgeConfig()
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: invalid TOML: {exc}") from exc
    known = {f.name for f in dataclasses.fields(RoomforgeConfig)}
    unknown = doc.keys() - known
    if unknown:
        raise ParseError(f"{path}: unknown config keys {sorted(unknown)}")
    return RoomforgeConfig(**doc)


def config_from_dict(doc: dict) -> RoomforgeConfig:
    known = {f.name for f in dataclasses.fields(RoomforgeConfig)}
    unknown = doc.keys() - known
    if unknown:
        raise ParseError(f"unknown config keys {sorted(unknown)}")
    return RoomforgeConfig(**doc)
