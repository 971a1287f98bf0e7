"""
Float codec (ENC/DEC) and the trainable numeric projectors.
"""
import hashlib
import logging
import math

import torch
from django.core.exceptions import ImproperlyConfigured
from torch import nn

logger = logging.getLogger(__name__)

PROJECTOR_DROPOUT = 0.1


def codec_hidden_width(latent_dim):
    return max(math.isqrt(latent_dim), 4)


def projector_hidden_width(latent_dim, model_dim):
    return max(2 * max(latent_dim, model_dim), 64)


class FloatCodec(nn.Module):
    """Scalar <-> r-dimensional latent.

    ENC is a 3-layer SiLU perceptron 1 -> h -> h -> r with h = max(isqrt(r), 4);
    DEC is LayerNorm(r) followed by a linear map to one value.
    """

    def __init__(self, latent_dim=16):
        super().__init__()
        if latent_dim < 1:
            raise ImproperlyConfigured(f"Codec latent dimension must be positive, got {latent_dim}")
        self.latent_dim = latent_dim
        self.hidden_width = codec_hidden_width(latent_dim)
        self.encoder = nn.Sequential(
            nn.Linear(1, self.hidden_width),
            nn.SiLU(),
            nn.Linear(self.hidden_width, self.hidden_width),
            nn.SiLU(),
            nn.Linear(self.hidden_width, latent_dim),
        )
        self.decoder = nn.Sequential(nn.LayerNorm(latent_dim), nn.Linear(latent_dim, 1))
        self.frozen = False

    def encode(self, x):
        """(...,) -> (..., r)"""
        return self.encoder(x.unsqueeze(-1))

    def decode(self, latent):
        """(..., r) -> (...,)"""
        if latent.shape[-1] != self.latent_dim:
            raise ImproperlyConfigured(
                f"Codec expects latents of size {self.latent_dim}, got {latent.shape[-1]}"
            )
        return self.decoder(latent).squeeze(-1)

    def forward(self, x):
        return self.decode(self.encode(x))

    def freeze(self):
        for param in self.parameters():
            param.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def train(self, mode=True):
        # a frozen codec stays in inference mode inside a training model
        return super().train(mode and not self.frozen)

    def checksum(self):
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode('utf-8'))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


class NumericProjectors(nn.Module):
    """PROJ_e: r -> D and PROJ_d: D -> r, both 2-layer SiLU perceptrons."""

    def __init__(self, latent_dim, model_dim, dropout=PROJECTOR_DROPOUT, hidden_width=None):
        super().__init__()
        self.latent_dim = latent_dim
        self.model_dim = model_dim
        self.hidden_width = hidden_width or projector_hidden_width(latent_dim, model_dim)
        self.input_projector = nn.Sequential(
            nn.LayerNorm(latent_dim),
            nn.Linear(latent_dim, self.hidden_width),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(self.hidden_width, model_dim),
        )
        self.output_projector = nn.Sequential(
            nn.Linear(model_dim, self.hidden_width),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(self.hidden_width, latent_dim),
        )

    def project_in(self, latent):
        if latent.shape[-1] != self.latent_dim:
            raise ImproperlyConfigured(
                f"Input projector expects size {self.latent_dim}, got {latent.shape[-1]}"
            )
        return self.input_projector(latent)

    def project_out(self, hidden):
        if hidden.shape[-1] != self.model_dim:
            raise ImproperlyConfigured(
                f"Output projector expects size {self.model_dim}, got {hidden.shape[-1]}"
            )
        return self.output_projector(hidden)


def check_compatible(codec, projectors):
    if codec.latent_dim != projectors.latent_dim:
        raise ImproperlyConfigured(
            f"Codec latent size {codec.latent_dim} does not match projector latent size "
            f"{projectors.latent_dim}"
        )


def encode_value(x_noisy_normalized, codec, projectors):
    """Normalized (possibly noisy) value(s) -> D-dimensional token embedding(s)."""
    check_compatible(codec, projectors)
    x = torch.as_tensor(x_noisy_normalized, dtype=next(codec.parameters()).dtype)
    return projectors.project_in(codec.encode(x))


def decode_hidden(h, codec, projectors):
    """D-dimensional hidden state(s) -> normalized-space prediction(s)."""
    check_compatible(codec, projectors)
    return codec.decode(projectors.project_out(h))
