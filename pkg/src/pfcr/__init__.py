"""Progressive fine-to-coarse reconstruction for low-bit post-training
quantization of small vision transformers."""

__version__ = "0.1.0"
