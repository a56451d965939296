"""Local discrimination learning: pixel-wise contrastive pretraining plus
shape-guided segmentation and one-shot landmark localization."""

__version__ = "0.1.0"

from ldlearn.nets import NetworkConfig, DiscriminatorConfig, build_embed_net, build_seg_net, build_discriminator

__all__ = [
    "NetworkConfig",
    "DiscriminatorConfig",
    "build_embed_net",
    "build_seg_net",
    "build_discriminator",
]
