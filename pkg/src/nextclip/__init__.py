"""Next-clip video prediction: flow-matching denoising of each clip
conditioned on the clean clips before it, with hierarchical attention
masking, progressive training, and an autoregressive sampler."""

__version__ = "0.1.0"
