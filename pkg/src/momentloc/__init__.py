"""Constant-memory temporal moment localization at desk scale.

A library and CLI for grounding natural-language queries in long feature
sequences: bucket-wise stochastic sampling keeps the transformer's input (and
therefore its memory) bounded regardless of video length, while evaluation
metrics, losses, and a memory-accounting harness make the behavior testable.
"""

from .core import (
    FeatureSequence,
    MomentAnnotation,
    Span,
    annotate,
    bucket_index_to_span,
    evaluate_pairs,
    frame_time_to_feature_index,
    mean_iou,
    recall_at,
    tiou,
)
from .sampling import (
    BucketPlan,
    SampledSequence,
    cosine_distance_matrix,
    drfs_buckets,
    dtw_buckets,
    frvs_decimate,
    make_bucket_plan,
    pool_infer,
    random_sample,
    remap_labels,
    sbfs_sample,
)
from .model import Adam, LocalizationModel, ModelConfig, load_checkpoint, predict_span, save_checkpoint

__version__ = "0.1.0"
