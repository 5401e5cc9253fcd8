"""Desk-scale conditional diffusion for image variations.

Train a small patch-transformer denoiser either to reconstruct its
conditioning image or to denoise a different image from the same
episode, sample with ancestral DDPM + classifier-free guidance, and
score variation quality with few-shot FID / k-NN precision-recall.
"""

from .data import (
    Corpus,
    EpisodeRecord,
    FilterConfig,
    ImageConfig,
    PairRecord,
    batch_iterator,
    filter_pairs,
    generate_corpus,
    sample_pair,
)
from .diffusion import (
    LossConfig,
    SamplerConfig,
    ddpm_step,
    diffusion_loss,
    forward_diffuse,
    guided_v,
    predictions_from_v,
    sample,
    v_target,
)
from .encoders import (
    ContextTokens,
    EncoderSpec,
    Factors,
    cosine_similarity,
    encode,
    precompute_embeddings,
)
from .metrics import (
    FeatureSet,
    FewShotConfig,
    MetricReport,
    extract_features,
    fewshot_evaluate,
    frechet_distance,
    guidance_sweep,
    knn_precision_recall,
)
from .model import BatchedContext, Denoiser, DenoiserConfig, drop_context, load_checkpoint
from .schedule import ScheduleConfig, SchedulePoint, log_snr_shift, schedule_at
from .tensor import NonFiniteError, Tape, Tensor, no_grad, validate_finite
from .training import TrainConfig, adam_step, ema_update, train

__version__ = "0.1.0"

__all__ = [
    "BatchedContext",
    "ContextTokens",
    "Corpus",
    "Denoiser",
    "DenoiserConfig",
    "EncoderSpec",
    "EpisodeRecord",
    "Factors",
    "FeatureSet",
    "FewShotConfig",
    "FilterConfig",
    "ImageConfig",
    "LossConfig",
    "MetricReport",
    "NonFiniteError",
    "PairRecord",
    "SamplerConfig",
    "ScheduleConfig",
    "SchedulePoint",
    "Tape",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "batch_iterator",
    "cosine_similarity",
    "ddpm_step",
    "diffusion_loss",
    "drop_context",
    "ema_update",
    "encode",
    "extract_features",
    "fewshot_evaluate",
    "filter_pairs",
    "forward_diffuse",
    "frechet_distance",
    "generate_corpus",
    "guidance_sweep",
    "guided_v",
    "knn_precision_recall",
    "load_checkpoint",
    "log_snr_shift",
    "no_grad",
    "precompute_embeddings",
    "predictions_from_v",
    "sample",
    "sample_pair",
    "schedule_at",
    "train",
    "v_target",
    "validate_finite",
]
