"""Latent masking and compressive counter-adversarial attacks on a small numpy autodiff core."""
from .attacks import AttackSpec, Ball, cca, compression_loss, pgd, project
from .config import PRESETS, ConfigError, RunConfig, build_config
from .masking import LatentMask, cca_mask, consistency_profile, keep_vector, oracle_mask, top_k_mask
from .model import ArchConfig, Classifier, build_model, load_checkpoint, save_checkpoint
from .training import SGD, evaluate, run_training, select_best

__version__ = "0.1.0"
