"""Negative-aware hierarchical attention for spatial gene-expression
regression on precomputed spot features."""

from .attention import (
    AttentionMaps,
    HeadProjections,
    NegAttnParams,
    multi_head_attention,
    neg_aware_attention,
    neg_aware_attention_knn,
    slopes,
)
from .data import (
    SlideRecord,
    SynthConfig,
    read_slide,
    strip_pseudo,
    synth_dataset,
    toy_slide,
    validate_slide,
    write_slide,
)
from .geometry import (
    AffineTransform,
    KnnGraph,
    SpotCoords,
    avg_nn_distance,
    bias_matrix,
    filter_pseudo,
    fit_affine,
    gen_pseudo_candidates,
    grid_distances,
    knn_indices,
)
from .model import (
    ForwardCache,
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    prepare_geometry,
)
from .numerics import (
    GradCheckReport,
    Rng,
    Tape,
    Tensor,
    finite_diff_check,
    mse_loss,
    seeded_normal,
)
from .training import (
    MetricsReport,
    OptimizerState,
    TrainConfig,
    adam_step,
    cosine_lr,
    evaluate,
    train,
)

__version__ = "0.1.0"
