"""Post-training quantization of small diffusion denoisers with meta-learned
calibration-sample weights."""

__version__ = "0.1.0"
