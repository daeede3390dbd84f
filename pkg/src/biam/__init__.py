"""Region-level multi-label zero-shot classification engine.

Precomputed region features are enriched by a bi-level attention head (region
self-attention plus scene-level channel gating), scored region-by-region
against class attribute embeddings, and top-k pooled into image-level class
scores.  Training optimizes a pairwise ranking loss with Adam; evaluation
covers zero-shot, generalized zero-shot and standard multi-label modes.
"""

from .errors import (
    BiamError,
    ConfigError,
    DataError,
    DatasetError,
    DimensionError,
    FormatError,
    LabelError,
    MetricError,
    NumericError,
    ParameterError,
    VerificationError,
)
from .head import (
    AttributeMatrix,
    BiamParams,
    ModelConfig,
    ResponseMaps,
    biam_forward,
    classify_regions,
    init_params,
    load_checkpoint,
    rcb_forward,
    save_checkpoint,
    scb_forward,
)
from .metrics import EvalReport, evaluate, f1_at_k, mean_average_precision
from .tensor import (
    BackwardRule,
    BatchNormState,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    grad_check,
    l2_normalize_rows,
    matmul,
    pointwise,
    set_debug,
    softmax_rows,
    topk_mean_pool,
)
from .train import (
    AdamState,
    LabelSet,
    TrainConfig,
    adam_step,
    ranking_loss,
    train_epoch,
    warmup_lr,
)

__version__ = "0.1.0"
