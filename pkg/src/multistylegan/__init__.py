"""Two-domain, multi-timestep style-based GAN for time-lapse microscopy sequences."""

from .ada import AdaState, apply_augmentation, overfitting_heuristic, update_p
from .config import RunConfig, load_config, tiny_config
from .data import DatasetIndex, count_windows, index_dataset, load_window
from .discriminator import DiscriminatorConfig, DiscriminatorOutput, UNetDiscriminator, sequences_to_channels
from .dsc import DSCBlock, FeaturePair, modulate_weights, style_from_latent
from .generator import Generator, GeneratorConfig, ImageSequencePair
from .metrics import compute_fid, compute_fvd, frechet_distance, gaussian_stats, inception_score
from .trainer import Trainer, ema_update, run_training

__version__ = "0.1.0"
