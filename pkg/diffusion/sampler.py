"""
Coupled reverse sampler.

Tokens start as prompt + G masks and are revealed progressively from
Gumbel-max proposals; numerics start at N(0, sigma_max^2) and follow
EDM-style (optionally churned) Euler steps driven by the same forward
pass. Each record owns a generator seeded from (seed, record index), so
any contiguous shard of records samples identically on its own.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
import pandas as pd
import torch
from django.db import models

from mdlm.layout import detokenize_row
from schedules.services import ChurnConfig, discretize
from tabular.schema import Table

from .utils import derive_seed, make_generator

logger = logging.getLogger(__name__)


class UnmaskPolicy(models.TextChoices):
    CONFIDENCE = 'confidence', 'High-confidence'
    RANDOM = 'random', 'Random'


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    policy: str = UnmaskPolicy.CONFIDENCE
    temperature: float = 1.0
    churn: ChurnConfig = field(default_factory=ChurnConfig)
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.policy not in UnmaskPolicy.values:
            raise ValueError(f"Unknown unmasking policy '{self.policy}'")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class SampleResult:
    tokens: torch.Tensor
    numbers: torch.Tensor
    masked_counts: list
    start: int = 0


def reveal_schedule(generation_length, steps):
    """Per-step reveal counts: as equal as possible, remainder on the earliest steps."""
    base, remainder = divmod(generation_length, steps)
    return [base + (1 if i < remainder else 0) for i in range(steps)]


def gumbel_sample(logits, temperature=1.0, generator=None):
    """argmax(logits / tau + Gumbel) over the last axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if torch.isneginf(logits).all(dim=-1).any():
        raise ValueError("Cannot sample from logits that are all -inf")
    u = torch.rand(logits.shape, generator=generator, device=logits.device, dtype=torch.float64)
    gumbel = -torch.log(-torch.log(u.clamp(1e-300, 1.0 - 1e-16)))
    return torch.argmax(logits.double() / temperature + gumbel, dim=-1)


def unmask_step(tokens, candidates, confidences, masked, reveal_count, policy, generator=None):
    """Reveal `reveal_count` masked positions of one record.

    tokens, candidates, confidences, masked are 1-D over the sequence.
    Returns (tokens, masked) as new tensors.
    """
    positions = torch.nonzero(masked, as_tuple=False).flatten()
    if reveal_count > positions.numel():
        raise ValueError(f"Cannot reveal {reveal_count} of {positions.numel()} masked positions")
    tokens, masked = tokens.clone(), masked.clone()
    if reveal_count == 0:
        return tokens, masked
    if policy == UnmaskPolicy.CONFIDENCE:
        order = torch.argsort(confidences[positions], descending=True, stable=True)
    elif policy == UnmaskPolicy.RANDOM:
        order = torch.randperm(positions.numel(), generator=generator)
    else:
        raise ValueError(f"Unknown unmasking policy '{policy}'")
    chosen = positions[order[:reveal_count]]
    tokens[chosen] = candidates[chosen]
    masked[chosen] = False
    return tokens, masked


def euler_update(x_hat, x_tilde, sigma_hat, sigma_next):
    """x_next = x_hat + (sigma_next - sigma_hat) * (x_hat - x_tilde) / sigma_hat.

    Where sigma_hat is 0 the prediction is returned as is.
    """
    x_hat, x_tilde = torch.as_tensor(x_hat), torch.as_tensor(x_tilde)
    sigma_hat = torch.as_tensor(sigma_hat, dtype=x_hat.dtype)
    sigma_next = torch.as_tensor(sigma_next, dtype=x_hat.dtype)
    safe = torch.where(sigma_hat > 0, sigma_hat, torch.ones_like(sigma_hat))
    stepped = x_hat + (sigma_next - sigma_hat) * (x_hat - x_tilde) / safe
    return torch.where(sigma_hat > 0, stepped, x_tilde)


def _proposal_logits(logits, vocabulary):
    """Forbid every special token except [PAD] as a proposal."""
    banned = sorted(vocabulary.special_ids - {vocabulary.pad_id})
    logits = logits.clone()
    logits[..., banned] = float('-inf')
    return logits


@torch.no_grad()
def sample_batch(denoiser, layout, vocabulary, config, start, count, schedule):
    """Sample records start .. start+count-1 from one forward pass per step."""
    device = getattr(denoiser, 'device', torch.device('cpu'))
    dtype = getattr(denoiser, 'dtype', torch.float32)
    steps = config.steps
    levels = discretize(schedule, steps, config.churn)
    generators = [make_generator(derive_seed(config.seed, 'record', start + i)) for i in range(count)]

    template = torch.tensor(layout.template(vocabulary, vocabulary.mask_id), dtype=torch.long)
    tokens = template.repeat(count, 1).to(device)
    masked = torch.zeros_like(tokens, dtype=torch.bool)
    masked[:, layout.generation_positions] = True
    num_features = len(layout.numeric_names)
    sigma_max = torch.as_tensor(levels.sigma(steps), dtype=torch.float64)
    x = torch.stack([
        torch.randn(num_features, generator=g, dtype=torch.float64) * sigma_max for g in generators
    ]).reshape(count, num_features)

    reveals = reveal_schedule(layout.generation_length, steps)
    masked_counts = [int(masked.sum())]
    for k, t in enumerate(range(steps, 0, -1)):
        sigma_t = torch.as_tensor(levels.sigma(t), dtype=torch.float64)
        sigma_hat = torch.as_tensor(levels.sigma_hat(t), dtype=torch.float64)
        sigma_next = torch.as_tensor(levels.sigma(t - 1), dtype=torch.float64)

        x_hat = x
        extra = torch.sqrt(torch.clamp(sigma_hat ** 2 - sigma_t ** 2, min=0.0))
        if bool((extra > 0).any()):
            noise = torch.stack([
                torch.randn(num_features, generator=g, dtype=torch.float64) for g in generators
            ])
            x_hat = x + extra * config.churn.s_noise * noise

        logits, x_pred = denoiser.denoise(
            tokens,
            x_hat.to(device=device, dtype=dtype),
            sigma_hat.expand(count, num_features).to(device=device, dtype=dtype),
        )
        logits = _proposal_logits(logits.double().cpu(), vocabulary) / config.temperature
        probs = torch.softmax(logits, dim=-1)

        new_tokens, new_masked = [], []
        for i, generator in enumerate(generators):
            candidates = gumbel_sample(logits[i], 1.0, generator)
            confidences = probs[i].gather(-1, candidates[:, None]).squeeze(-1)
            row, row_mask = unmask_step(
                tokens[i].cpu(), candidates, confidences, masked[i].cpu(), reveals[k],
                config.policy, generator,
            )
            new_tokens.append(row)
            new_masked.append(row_mask)
        tokens = torch.stack(new_tokens).to(device)
        masked = torch.stack(new_masked).to(device)
        masked_counts.append(int(masked.sum()))

        x = euler_update(x_hat, x_pred.double().cpu(), sigma_hat, sigma_next)

    return SampleResult(tokens=tokens.cpu(), numbers=x, masked_counts=masked_counts, start=start)


def sample(denoiser, layout, vocabulary, config, n, start=0, schedule=None):
    """Sample records start .. start+n-1 in batches of config.batch_size."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    schedule = schedule or denoiser.schedule()
    was_training = getattr(denoiser, 'training', False)
    if hasattr(denoiser, 'eval'):
        denoiser.eval()
    results = []
    for offset in range(0, n, config.batch_size):
        count = min(config.batch_size, n - offset)
        results.append(sample_batch(denoiser, layout, vocabulary, config, start + offset, count, schedule))
        logger.debug(f"Sampled records {start + offset}..{start + offset + count - 1}")
    if was_training:
        denoiser.train()
    counts = [sum(c) for c in zip(*(r.masked_counts for r in results))]
    return SampleResult(
        tokens=torch.cat([r.tokens for r in results]),
        numbers=torch.cat([r.numbers for r in results]),
        masked_counts=counts,
        start=start,
    )


def finalize(result, layout, vocabulary, schema, normalizers):
    """Detokenize spans and denormalize numerics.

    Returns (table of valid records, number of invalid records).
    """
    rows, invalid = [], 0
    numbers = result.numbers.numpy()
    denormalized = {}
    for j, name in enumerate(layout.numeric_names):
        values = normalizers[name].denormalize(numbers[:, j]) if len(numbers) else numbers[:, j]
        spec = schema.column(name)
        if spec.integer:
            values = np.rint(values).astype(np.int64)
        elif spec.decimals is not None:
            values = np.round(values, spec.decimals)
        denormalized[name] = values
    for i, token_row in enumerate(result.tokens.tolist()):
        fields, valid = detokenize_row(token_row, layout, vocabulary, schema)
        if not valid:
            invalid += 1
            continue
        record = dict(fields)
        for name in layout.numeric_names:
            record[name] = denormalized[name][i]
        rows.append(record)
    if invalid:
        logger.warning(f"{invalid} of {len(result.tokens)} sampled records were invalid")
    frame = pd.DataFrame(rows, columns=schema.names)
    for spec in schema.numerical:
        frame[spec.name] = frame[spec.name].astype(np.int64 if spec.integer else np.float64)
    return Table(schema, frame), invalid
