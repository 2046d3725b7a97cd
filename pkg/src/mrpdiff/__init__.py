"""Desk-scale block-diffusion language model engine with multi-token
residual prediction: a trainable head that predicts the change in the
denoiser's logits between adjacent unmasking steps, used either to decode
extra tokens directly or to draft tokens for backbone verification."""

__version__ = "0.1.0"
