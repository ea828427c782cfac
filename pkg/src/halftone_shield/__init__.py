"""Error-diffusion halftoning as an adversarial defense, with a from-scratch
classifier, white-box attacks and an evaluation harness."""

__version__ = "0.1.0"
