"""Hyperspherical consistency regularization on small numpy networks."""
__version__ = "0.1.0"

from .estimator import HCRClassifier
from .losses import HcrConfig, SimilarityConfig, composite_loss, hcr_loss
from .trainer import TrainConfig, train

__all__ = ["HCRClassifier", "HcrConfig", "SimilarityConfig", "TrainConfig",
           "composite_loss", "hcr_loss", "train"]
