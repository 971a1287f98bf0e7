import logging
from typing import Protocol

import torch
from django.core.exceptions import ImproperlyConfigured
from torch import nn

from mdlm.networks import TabularMDLM
from numcodec.networks import NumericProjectors, check_compatible

logger = logging.getLogger(__name__)


class InputScaling:
    NONE = 'none'
    EDM = 'edm'
    CHOICES = (NONE, EDM)


class Denoiser(Protocol):
    """Anything the sampler can drive.

    denoise(tokens (B, L), x_noisy (B, M), sigma (B, M)) -> (logits (B, L, V), x_pred (B, M))
    """

    def denoise(self, tokens, x_noisy, sigma): ...


class JointDenoiser(nn.Module):
    """Frozen codec + trainable projectors + backbone + power-mean noise.

    Noisy normalized numerics enter through ENC -> PROJ_e at the [NUM]
    slots; the hidden states at those slots go back out through
    PROJ_d -> DEC as clean-value predictions.
    """

    def __init__(self, codec, projectors, backbone, noise, input_scaling=InputScaling.NONE):
        super().__init__()
        check_compatible(codec, projectors)
        if projectors.model_dim != backbone.config.model_dim:
            raise ImproperlyConfigured(
                f"Projector width {projectors.model_dim} does not match backbone width "
                f"{backbone.config.model_dim}"
            )
        if noise.num_features != backbone.num_numeric:
            raise ImproperlyConfigured(
                f"Noise schedule has {noise.num_features} features, layout has "
                f"{backbone.num_numeric} numeric slots"
            )
        if input_scaling not in InputScaling.CHOICES:
            raise ImproperlyConfigured(f"Unknown numeric input scaling '{input_scaling}'")
        self.codec = codec
        self.projectors = projectors
        self.backbone = backbone
        self.noise = noise
        self.input_scaling = input_scaling

    @property
    def dtype(self):
        return self.backbone.tok_emb.weight.dtype

    @property
    def device(self):
        return self.backbone.tok_emb.weight.device

    def schedule(self):
        return self.noise.snapshot()

    def denoise(self, tokens, x_noisy, sigma):
        x_in = x_noisy
        if self.input_scaling == InputScaling.EDM:
            x_in = x_noisy / torch.sqrt(sigma ** 2 + 1.0)
        latents = self.projectors.project_in(self.codec.encode(x_in.to(self.dtype)))
        hidden, logits = self.backbone(tokens, latents, sigma.to(self.dtype))
        numeric_hidden = hidden[:, self.backbone.numeric_positions]
        x_pred = self.codec.decode(self.projectors.project_out(numeric_hidden))
        return logits, x_pred

    def forward(self, tokens, x_noisy, sigma):
        return self.denoise(tokens, x_noisy, sigma)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_denoiser(codec, layout, vocab_size, backbone_config, noise, dropout=0.1,
                   input_scaling=InputScaling.NONE, dtype=torch.float32):
    """Assemble a JointDenoiser around a frozen codec for the given layout."""

    if layout.length > backbone_config.max_len:
        raise ImproperlyConfigured(
            f"Layout length {layout.length} exceeds backbone max_len {backbone_config.max_len}"
        )
    backbone = TabularMDLM(backbone_config, vocab_size, layout.numeric_positions)
    projectors = NumericProjectors(codec.latent_dim, backbone_config.model_dim, dropout=dropout)
    denoiser = JointDenoiser(codec.freeze(), projectors, backbone, noise, input_scaling)
    denoiser = denoiser.to(dtype)
    logger.info(
        f"Built denoiser: {sum(p.numel() for p in denoiser.trainable_parameters())} trainable parameters"
    )
    return denoiser
