"""causalvit: a desk-scale decoder-only vision transformer.

Causal multi-head self-attention with rotary embeddings, a class token
placed after the image tokens so the causal mask cannot starve it, a
soft-mask training curriculum that anneals from bidirectional to causal
attention, and analysis tools (attention-map rank spectra, an attention
FLOPs model, expected calibration error). Built on a small numpy tensor
library with tape-based reverse-mode autodiff.
"""

from .analysis import CalibrationReport, RankSpectrum, attention_flops, ece, effective_rank_index, rank_spectrum
from .attention import (
    BIDIRECTIONAL,
    CAUSAL,
    MODIFIED_CAUSAL,
    AttentionCollapseError,
    AttentionParams,
    AttentionRecord,
    MaskKind,
    build_additive_mask,
    build_soft_mask,
    mhsa_forward,
    read_attention_dump,
    soft,
    write_attention_dump,
)
from .data import Dataset, load_cifar10, load_mnist, make_synthetic
from .gradcheck import OracleUnusableError, finite_diff_check
from .layers import (
    LPETable,
    PatchEmbed,
    RMSNormParams,
    RoPECache,
    SwiGLUParams,
    add_lpe,
    apply_rope,
    build_rope_cache,
    patchify,
    rmsnorm,
    swiglu,
    swiglu_hidden,
)
from .model import (
    Block,
    BuildError,
    ClsPlacement,
    Model,
    ModelConfig,
    PRESETS,
    build,
    forward,
    insert_cls,
    load_checkpoint,
    param_count,
    parameter_shapes,
    save_checkpoint,
)
from .svd import ConvergenceError, svd_singular_values
from .tensor import (
    NEG_INF,
    DegenerateRowError,
    GradTape,
    RankError,
    ShapeError,
    Tensor,
    backward,
    matmul,
    softmax_rows,
    zero_grads,
)
from .training import (
    AdamW,
    DivergenceError,
    EpochMetrics,
    LrSchedule,
    Scheme,
    SoftMaskSchedule,
    TrainConfig,
    adamw_step,
    alpha_at,
    cross_entropy_smoothed,
    cutmix,
    lr_at,
    mixup,
    train,
)

__version__ = "0.1.0"
