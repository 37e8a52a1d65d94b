"""Context-aware convolutional network for image restoration.

Star-operation residual blocks, dynamic strip attention, a six-scale
encoder-decoder backbone with multi-scale inputs/outputs, a dual-domain loss,
and a synthetic-degradation training/evaluation harness.
"""

from .backbone import (
    CCNet,
    ModelConfig,
    ScaleOutputs,
    build_model,
    count_macs,
    count_parameters,
    forward_multiscale,
    multiscale_targets,
)
from .blocks import (
    DRSM,
    ERSM,
    ChannelLayerNorm,
    ContextStarUnit,
    PlainResidualBlock,
    layer_norm_channels,
)
from .data_synth import (
    DegradationSpec,
    extract_patches,
    load_pairs,
    make_dataset,
    synth_haze,
    synth_motion_blur,
    synth_snow,
)
from .losses import LossTerms, dual_domain_loss, psnr, ssim
from .rsam import RSAM
from .strip_attention import (
    HORIZONTAL,
    LDIM,
    LDSI,
    VERTICAL,
    StripWeightGenerator,
    dilation_rate,
    generate_strip_weights,
    receptive_extent,
    strip_apply,
)
from .train_eval import (
    AdamState,
    TrainConfig,
    adam_step,
    cosine_lr,
    evaluate,
    grad_check,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
