"""
Bidirectional transformer backbone for the masked diffusion language model.
"""
from dataclasses import dataclass, asdict
import logging
import math

import torch
import torch.nn.functional as F
from django.core.exceptions import ImproperlyConfigured
from torch import nn

logger = logging.getLogger(__name__)

NOISE_FREQUENCY_DIM = 256
# ln(sigma) / 4 (EDM's c_noise) stretched onto a DiT-like timestep range
NOISE_INPUT_SCALE = 250.0


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    ff_dim: int = 512
    max_len: int = 256
    dropout: float = 0.0
    lora_rank: int = 0
    lora_alpha: float = 32.0
    lora_dropout: float = 0.05
    use_positions: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.ff_dim < 1 or self.max_len < 1:
            raise ImproperlyConfigured(f"Backbone sizes must be positive: {self}")
        if self.model_dim % self.heads:
            raise ImproperlyConfigured(
                f"model_dim {self.model_dim} is not divisible by heads {self.heads}"
            )
        if self.lora_rank < 0:
            raise ImproperlyConfigured(f"lora_rank must be >= 0, got {self.lora_rank}")

    def to_dict(self):
        return asdict(self)


class LoRALinear(nn.Module):
    """nn.Linear plus an optional low-rank update B @ A scaled by alpha / rank."""

    def __init__(self, in_features, out_features, rank=0, alpha=32.0, dropout=0.05, bias=True):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.rank = rank
        if rank > 0:
            self.lora_A = nn.Parameter(torch.empty(rank, in_features))
            self.lora_B = nn.Parameter(torch.zeros(out_features, rank))
            nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
            self.lora_dropout = nn.Dropout(dropout)
            self.scaling = alpha / rank

    @property
    def weight(self):
        return self.base.weight

    def forward(self, x):
        out = self.base(x)
        if self.rank > 0:
            out = out + (self.lora_dropout(x) @ self.lora_A.t() @ self.lora_B.t()) * self.scaling
        return out


class TransformerBlock(nn.Module):
    """Pre-LN block: full self-attention (no causal mask) then a GELU MLP."""

    def __init__(self, config):
        super().__init__()
        D = config.model_dim
        lora = dict(rank=config.lora_rank, alpha=config.lora_alpha, dropout=config.lora_dropout)
        self.heads = config.heads
        self.dropout = config.dropout
        self.ln_attn = nn.LayerNorm(D)
        self.q_proj = LoRALinear(D, D, **lora)
        self.k_proj = LoRALinear(D, D, **lora)
        self.v_proj = LoRALinear(D, D, **lora)
        self.out_proj = LoRALinear(D, D, **lora)
        self.ln_mlp = nn.LayerNorm(D)
        self.fc1 = LoRALinear(D, config.ff_dim, **lora)
        self.fc2 = LoRALinear(config.ff_dim, D, **lora)
        self.resid_dropout = nn.Dropout(config.dropout)

    def _split(self, x):
        B, L, D = x.shape
        return x.view(B, L, self.heads, D // self.heads).transpose(1, 2)

    def attention(self, x):
        B, L, D = x.shape
        q, k, v = self._split(self.q_proj(x)), self._split(self.k_proj(x)), self._split(self.v_proj(x))
        y = F.scaled_dot_product_attention(
            q, k, v, dropout_p=self.dropout if self.training else 0.0, is_causal=False,
        )
        return self.out_proj(y.transpose(1, 2).reshape(B, L, D))

    def forward(self, x):
        x = x + self.resid_dropout(self.attention(self.ln_attn(x)))
        x = x + self.resid_dropout(self.fc2(F.gelu(self.fc1(self.ln_mlp(x)))))
        return x


class NoiseLevelEmbedding(nn.Module):
    """Sinusoidal features of log(sigma) followed by a SiLU MLP."""

    def __init__(self, model_dim, frequency_dim=NOISE_FREQUENCY_DIM, max_period=10000):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.max_period = max_period
        self.mlp = nn.Sequential(
            nn.Linear(frequency_dim, model_dim),
            nn.SiLU(),
            nn.Linear(model_dim, model_dim),
        )

    def frequencies(self, sigma):
        c_noise = NOISE_INPUT_SCALE * torch.log(sigma.clamp_min(1e-12))
        half = self.frequency_dim // 2
        freqs = torch.exp(
            -math.log(self.max_period) * torch.arange(half, dtype=sigma.dtype, device=sigma.device) / half
        )
        args = c_noise[..., None] * freqs
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, sigma):
        """(...,) noise levels -> (..., D)"""
        return self.mlp(self.frequencies(sigma).to(self.mlp[0].weight.dtype))


class TabularMDLM(nn.Module):
    """Token embedding, positional embedding, transformer stack and a tied LM head.

    `numeric_positions` are the fixed [NUM] slots of the layout; their input
    embedding is replaced by projected numeric latents plus a noise-level
    embedding.
    """

    def __init__(self, config, vocab_size, numeric_positions=()):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        self.tok_emb = nn.Embedding(vocab_size, config.model_dim)
        self.pos_emb = nn.Embedding(config.max_len, config.model_dim)
        self.noise_emb = NoiseLevelEmbedding(config.model_dim)
        self.drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(TransformerBlock(config) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(config.model_dim)
        self.head_bias = nn.Parameter(torch.zeros(vocab_size))
        self.register_buffer(
            'numeric_positions', torch.tensor(list(numeric_positions), dtype=torch.long),
            persistent=False,
        )
        self.apply(self._init_weights)
        if config.lora_rank > 0:
            self._freeze_base()

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def _freeze_base(self):
        for name, param in self.named_parameters():
            if 'lora_' not in name and not name.startswith('noise_emb.'):
                param.requires_grad_(False)
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        logger.info(f"Low-rank adapters enabled: {trainable} trainable backbone parameters")

    @property
    def num_numeric(self):
        return self.numeric_positions.numel()

    def embed(self, tokens, numeric_latents=None, sigma=None):
        """tokens (B, L), numeric_latents (B, M, D), sigma (B, M) -> (B, L, D)"""
        B, L = tokens.shape
        if L > self.config.max_len:
            raise ValueError(f"Sequence length {L} exceeds max_len {self.config.max_len}")
        x = self.tok_emb(tokens)
        if self.num_numeric:
            if numeric_latents is None or numeric_latents.shape[1] != self.num_numeric:
                got = None if numeric_latents is None else numeric_latents.shape[1]
                raise ValueError(f"Expected {self.num_numeric} numeric latents, got {got}")
            numeric = numeric_latents + self.noise_emb(sigma)
            x = x.index_copy(1, self.numeric_positions, numeric.to(x.dtype))
        elif numeric_latents is not None and numeric_latents.shape[1]:
            raise ValueError(f"Expected no numeric latents, got {numeric_latents.shape[1]}")
        if self.config.use_positions:
            x = x + self.pos_emb(torch.arange(L, device=tokens.device))
        return self.drop(x)

    def encode(self, embeddings):
        """(B, L, D) -> final hidden states (B, L, D)"""
        if embeddings.shape[1] > self.config.max_len:
            raise ValueError(
                f"Sequence length {embeddings.shape[1]} exceeds max_len {self.config.max_len}"
            )
        h = embeddings
        for block in self.blocks:
            h = block(h)
        return self.ln_f(h)

    def lm_head(self, hidden):
        return F.linear(hidden, self.tok_emb.weight, self.head_bias)

    def forward(self, tokens, numeric_latents=None, sigma=None):
        hidden = self.encode(self.embed(tokens, numeric_latents, sigma))
        return hidden, self.lm_head(hidden)
