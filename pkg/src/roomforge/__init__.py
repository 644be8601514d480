"""roomforge: layout-conditioned 3D room mesh generation."""

from .align import (AlignConfig, DepthField, GuidanceDepth, NormalField, align_depth,
                    build_guidance, compute_normals, loss_depth, loss_normal,
                    z_to_distance)
from .backends import (BackendDescriptor, Backends, GeneratorRequest, MockDepthEstimator,
                       MockGenerator, MockMasker, mock_backends, remote_call)
from .completion import (CompletionConfig, CompletionState, CompletionStep, classify_holes,
                         complete_step, expand_mask, run_completion,
                         sample_completion_viewpoints, telea_inpaint)
from .config import RoomforgeConfig, load_config
from .meshing import (DensityMesh, FusionVolume, OrientedPoints, SceneMesh,
                      backproject_panorama, clean_mesh, extract_mesh, integrate_frame)
from .metrics import MetricsReport, coverage_score, pa_score
from .panorama import (PanoramaGrid, ViewCorrespondence, ViewFan, build_fan, correspondence,
                       equirect_to_views, fuse_distance_panorama, views_to_equirect)
from .pipeline import PipelineState, make_backends, run_stage, stage_seed
from .render import ControlFrames, MeshRender, ray_box_intersect, render_controls, render_mesh
from .scene import (ProxyRoom, RoomShell, SemanticBox, SemanticPalette, ViewLimits, Viewpoint,
                    load_proxy, point_in_box, serialize_proxy, validate_viewpoint)

__version__ = "0.1.0"
