"""Semi-supervised pixel segmentation with subclass-contrastive training."""

from subseg.estimator import PixelContrastSegmenter

__version__ = "0.1.0"

__all__ = ["PixelContrastSegmenter", "__version__"]
