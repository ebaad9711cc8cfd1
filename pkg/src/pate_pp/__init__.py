"""Private teacher-ensemble labeling with a co-teaching semi-supervised GAN student."""

__version__ = "0.1.0"
