"""Vector-quantized common latent space for multi-sequence image translation."""

__version__ = "0.1.0"
