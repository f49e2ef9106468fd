"""Still-image-to-video synthesis: sample multi-step flows, then render frames."""

from .config import ModelConfig
from .core import (
    NormalizedFlow,
    VideoClip,
    backward_warp,
    default_max_disp,
    denormalize_flow,
    normalize_flow,
    stack_condition,
    warp_tensor,
)
from .errors import (
    ConfigurationError,
    EstimationError,
    EvaluationError,
    FlowFormatError,
    IngestionError,
    InvalidInputError,
    Still2VideoError,
    TrainingError,
)
from .flow2rgb import FeatureExtractor, Flow2Rgb, TrunkLayout, extract_features, generate_next_frame, loss_flow2rgb
from .flow_vae import (
    FlowVAE,
    LatentDistribution,
    condition_latent,
    encode_image,
    kl_divergence,
    loss_cvae,
    sample_latent,
    vae_decode,
    vae_encode,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import (
    EmbeddingPoint,
    MetricsReport,
    diversity_stats,
    embed_sequences,
    perceptual_dissimilarity,
    rmse_flows,
    rmse_frames,
)
from .pipeline import (
    PredictionResult,
    TrainConfig,
    baseline_copy,
    baseline_random_flow,
    predict_sequence,
    rollout_with_flows,
    train_flow2rgb,
    train_flow_vae,
)

__version__ = "0.1.0"
