"""Skull-guided facial reconstruction at desk scale.

Reconstruct faces consistent with a query skull in three stages: fit a
parametric head model to landmark data through an analytic differentiable
image-formation model, score skull-face superimpositions with
tissue-depth-extended landmarks, and re-synthesize unmatched regions by
minimizing a composed context + prior + geometry loss over a generator's
latent space.
"""

from .errors import (
    ConfigError,
    ContractViolation,
    CraniofitError,
    FitError,
    GeometryError,
    InpaintError,
    ModelError,
    NumericalError,
    RenderError,
    SuperimposeError,
)
from .facemodel import (
    FaceModel,
    SemanticCodeVector,
    evaluate,
    evaluate_jacobian,
    evaluate_mesh_from_code,
    synthesize_model,
    synthesize_region_labels,
)
from .fitting import FitConfig, FitResult, FittingEncoder, LandmarkSet, fit_multi, fit_single, geometric_loss
from .geometry import LandmarkGraph, Mesh, delaunay, offset_surface_project, vertex_normals
from .inpaint import (
    InpaintProblem,
    MaskImage,
    Segmentation,
    build_mask,
    context_loss,
    geometry_loss,
    importance_weights,
    prior_loss,
    reference_gan,
    select_unmatched_regions,
    solve,
)
from .pipeline import PipelineConfig, PipelineReport, generate_scene, run_resynth, write_scene
from .render import (
    Camera,
    CameraIntrinsics,
    Illumination,
    RenderedImage,
    backward,
    normalize_render,
    project,
    render,
    shade,
)
from .superimpose import (
    SkullAnnotation,
    SuperimpositionResult,
    TissueDepth,
    TissueDepthTable,
    definite_region_landmarks,
    extend_landmarks,
    rank_candidates,
    superimpose,
)

__version__ = "0.1.0"
