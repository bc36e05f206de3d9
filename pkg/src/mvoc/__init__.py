"""Training-free composition of multiple video objects on a deterministic
diffusion sampler: per-object inversion trajectories condition the composite
through layered feature/attention injection and telescoped guidance, with
closed-form denoisers and synthetic ground-truth scenes keeping every piece
exactly checkable."""

from .core import (
    AffineTransform,
    FlowField,
    Mask,
    VideoTensor,
    affine_apply,
    hadamard_blend,
    mask_resample,
    warp_mask,
)
from .denoiser import (
    NULL_CONDITION,
    ConditionSet,
    Dataset,
    DenoiserInput,
    eps_empirical,
    posterior_mean,
    score_from_eps,
)
from .errors import ConfigError, IOFormatError, MvocError, NumericError
from .guidance import (
    GuidanceWeights,
    cfg,
    compose_eps_chained,
    compose_eps_independent,
    compose_eps_omega,
    weights_to_omega,
)
from .injection import (
    InjectionBundle,
    InjectionSchedule,
    ObjectLayer,
    build_injection_bundle,
    compose_layers,
    guided_eps,
    injection_active,
)
from .metrics import (
    WarpMetricConfig,
    occlusion_from_flow_consistency,
    sequence_warping_error,
    warp_frame,
    warping_error,
)
from .pipeline import (
    ComposeResult,
    CompositionJob,
    ObjectInput,
    compose_video,
    edit_first_frame,
    load_job,
    masked_psnr,
    preprocess_objects,
)
from .sampler import (
    SampleResult,
    TimestepPlan,
    ddim_invert_step,
    ddim_step,
    invert_loop,
    predict_x0,
    sample_loop,
    uniform_plan,
)
from .schedule import NoiseSchedule, build_schedule, ddpm_step, forward_marginal
from .synthdata import (
    BackgroundSpec,
    ObjectSpec,
    RenderResult,
    SceneSpec,
    build_dataset,
    non_occlusion_mask,
    object_flow,
    render_scene,
    scene_flow,
)
from .unet import MiniUNet, UNetConfig, UNetTapSet, unet_forward

__version__ = "0.1.0"
