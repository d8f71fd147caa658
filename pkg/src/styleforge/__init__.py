"""Multi-dimensional text style transfer: a pretrained-LM encoder-decoder
fine-tuned with denoising, steered by frozen style-LM discriminators
through policy-gradient rewards, plus the evaluation battery."""

__version__ = "0.1.0"
