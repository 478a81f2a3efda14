"""Tile-based 3D Gaussian splatting: renderer, trainer, and workload models.

The pipeline projects anisotropic 3D Gaussians to screen-space splats,
bins them into image tiles sorted by depth, and alpha-composites front
to back. Blending can run as one global sweep, in depth chunks merged
by inter-chunk transmittance, or with a hybrid schedule that switches
to pixel-centric traversal for the tail of each tile list; all three
produce bit-identical images. The backward pass reconstructs per-pixel
transmittance from the forward trace and chains screen-space gradients
back to the raw Gaussian parameters, optionally through an approximate
reciprocal that mirrors a hardware divider.
"""

from .approxmath import DEFAULT_LUT, RecipLUT, make_recip_lut, recip_one_minus
from .backward import (
    GradAccumulator,
    TrainConfig,
    TrainStepResult,
    loss_and_pixel_grads,
    scene_backward,
    train_step,
)
from .execmodel import (
    BankModel,
    EvalCounters,
    OcclusionTrace,
    RenderStats,
    TrainStats,
    bank_conflicts,
    hybrid_savings,
    occlusion_curve,
    sweep_reduction,
    tile_sweep,
)
from .forward import (
    ALPHA_MAX,
    ALPHA_MIN,
    ForwardTrace,
    RenderConfig,
    RenderResult,
    render,
)
from .gradcheck import check_gradients, fd_grads, fd_probe, make_fd_case
from .model import (
    OPACITY_MAX,
    Camera,
    Gaussian3D,
    GaussianScene,
    ImageRGB,
    activate,
    covariance3,
    opacity_to_logit,
    quat_normalize,
    quat_to_rotmat,
    stable_sigmoid,
)
from .optim import (
    AdamState,
    DensifyOptions,
    DensifyReport,
    DensifyStats,
    adam_step,
    density_control,
    remap_adam_state,
    scene_adam_step,
)
from .preprocess import (
    PreprocessStats,
    Splat2D,
    SplatBatch,
    TileBinning,
    bin_and_sort,
    compute_aabb,
    preprocess,
    project_gaussian,
)
from .sceneio import (
    PlyError,
    load_cameras,
    load_image,
    load_ply,
    load_ppm,
    psnr,
    save_cameras,
    save_image,
    save_ply,
    save_ppm,
)
from .sh import coeff_count, eval_sh, eval_sh_batch, sh_basis, sh_basis_grad

__version__ = "0.1.0"

__all__ = [
    "ALPHA_MAX",
    "ALPHA_MIN",
    "AdamState",
    "BankModel",
    "Camera",
    "DEFAULT_LUT",
    "DensifyOptions",
    "DensifyReport",
    "DensifyStats",
    "EvalCounters",
    "ForwardTrace",
    "Gaussian3D",
    "GaussianScene",
    "GradAccumulator",
    "ImageRGB",
    "OPACITY_MAX",
    "OcclusionTrace",
    "PlyError",
    "PreprocessStats",
    "RecipLUT",
    "RenderConfig",
    "RenderResult",
    "RenderStats",
    "Splat2D",
    "SplatBatch",
    "TileBinning",
    "TrainConfig",
    "TrainStats",
    "TrainStepResult",
    "activate",
    "adam_step",
    "bank_conflicts",
    "bin_and_sort",
    "check_gradients",
    "coeff_count",
    "compute_aabb",
    "covariance3",
    "density_control",
    "eval_sh",
    "eval_sh_batch",
    "fd_grads",
    "fd_probe",
    "hybrid_savings",
    "load_cameras",
    "load_image",
    "load_ply",
    "load_ppm",
    "loss_and_pixel_grads",
    "make_fd_case",
    "make_recip_lut",
    "occlusion_curve",
    "opacity_to_logit",
    "preprocess",
    "project_gaussian",
    "psnr",
    "quat_normalize",
    "quat_to_rotmat",
    "recip_one_minus",
    "remap_adam_state",
    "render",
    "save_cameras",
    "save_image",
    "save_ply",
    "save_ppm",
    "scene_adam_step",
    "scene_backward",
    "sh_basis",
    "sh_basis_grad",
    "stable_sigmoid",
    "sweep_reduction",
    "tile_sweep",
    "train_step",
]
