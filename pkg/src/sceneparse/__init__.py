"""Compose indoor scene models (layout planes and object meshes) from a depth image."""

from .alignment import AlignmentResult, FitWeights, align_candidates, align_model, fitting_cost, icp_translation
from .composition import (
    Candidate,
    SceneHypothesis,
    SelectionProblem,
    SelectionWeights,
    brute_force_compose,
    candidate_energy,
    compose_scene,
    prune_proposals,
    selection_cost,
)
from .estimators import LayoutDetector, ModelAligner, SceneComposer
from .evaluation import (
    MetricReport,
    VoxelGrid,
    coverage_metrics,
    evaluate_scene,
    layout_depth_error,
    layout_pixel_error,
    occupancy_metrics,
    relative_depth_error,
    voxelize_scene,
)
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    PointCloud,
    PoseTransform,
    RenderResult,
    TriangleMesh,
    backproject,
    render_depth,
    render_depth_range,
)
from .layout import (
    LayoutConfig,
    LayoutPlane,
    PlaneFeatures,
    detect_planes,
    nms_planes,
    plane_extent,
    plane_features,
    point_plane_probability,
    support_height_candidates,
)
from .scene_io import SceneFile, SceneObject, default_config, load_config, load_pool, load_scene, save_pool, save_scene
from .synth import SynthParams, SynthResult, synth_scene
from .validation import InputError

__version__ = "0.1.0"
