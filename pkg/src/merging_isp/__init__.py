"""Direct HDR reconstruction from multi-exposure raw Bayer stacks.

Two trainable conv subnets joined by an analytic LDR->HDR conversion, a
mu-law tonemapped L2 loss, and a small deterministic autodiff engine
underneath. See the CLI (``merging-isp``) for the end-user surface.
"""

from .align import Displacement, estimate_translation, warp_translate
from .cfa import RGGB, CfaPattern, RawImage, bilinear_demosaic, mosaic_rggb
from .dataio import (
    Scene,
    SceneManifest,
    extract_patches,
    load_scene,
    read_manifest,
    read_pfm,
    read_png16,
    synthesize_scene,
    write_pfm,
    write_png16,
)
from .metrics import psnr, ssim
from .model import (
    FusionSubnetConfig,
    ModelParams,
    ReconstructionSubnetConfig,
    build_feature_volume,
    domain_convert,
    fusion_forward,
    merging_isp_forward,
    param_count,
    reconstruction_forward,
)
from .objective import hdr_loss, mu_law, tonemap
from .tensor import (
    AdamState,
    DomainError,
    GraphError,
    ShapeError,
    Tensor,
    adam_step,
    grad_check,
    xavier_init,
)
from .training import (
    AblationVariant,
    Checkpoint,
    MetricTable,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    infer,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
