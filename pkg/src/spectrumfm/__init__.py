"""Spectrum foundation model: a convolution-augmented transformer encoder over
amplitude/phase frames, self-supervised pre-training, LoRA fine-tuning for
spectrum sensing, anomaly detection and technology classification."""

__version__ = "0.1.0"
