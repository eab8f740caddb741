"""Noisy-correspondence cross-view geo-localization lab: synthetic pairs, co-training with
GMM co-divide, evidential losses and saliency-masked augmentation."""

__version__ = "0.1.0"
