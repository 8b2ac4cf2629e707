"""Semi-supervised segmentation with contrastive distillation and anatomical contrast."""

__version__ = "0.1.0"
