"""Differentiable feature-Gaussian splatting into BEV maps with satellite
matching for ground-to-satellite localization."""

from .geometry import (
    BevGridSpec,
    PanoramaGeometry,
    PinholeIntrinsics,
    backproject_panorama,
    backproject_pinhole,
    panorama_pixel_to_angles,
    world_to_bev_cell,
)
from .primitives import (
    GaussianPrimitive,
    PrimitiveSet,
    RawAttributes,
    activate_attributes,
    build_covariance,
    degenerate_raw_attributes,
    generate_primitives,
)
from .renderer import (
    BevOutput,
    GradientBundle,
    RenderConfig,
    Splat2D,
    SplatBatch,
    project_batch,
    project_to_bev,
    render_backward,
    render_forward,
    render_reference,
)
from .matching import PeakResult, SimilarityMap, peak, similarity_map, weight_features
from .losses import LossConfig, LossReport, gps_loss, total_loss, weakly_loss
from .baselines import direct_project, ipm_project
from .pipeline import GroundInputs, PipelineConfig, localize, loss_backward, loss_forward
from .synth import (
    LocalizationRecord,
    Scene,
    SceneSpec,
    evaluate_localization,
    make_scene,
    optimize_primitives,
)
from .tensor_io import TensorContainer, load_tensor, read_tensor, save_tensor, write_tensor

__version__ = "0.1.0"
