"""
Joint forward corruption and the training objective.

Every record draws one t ~ U[0, 1] that drives both its numeric noise
level and its token masking probability.
"""
from dataclasses import dataclass, asdict
import logging
import math

import torch
import torch.nn.functional as F

from schedules.services import MaskSchedule

logger = logging.getLogger(__name__)

LAMBDA_MAX = 1.0
S_WARM = 2000
ELBO_T_FLOOR = 1e-3


class TextLoss:
    PLAIN = 'plain'
    ELBO = 'elbo'
    CHOICES = (PLAIN, ELBO)


@dataclass
class NoisyBatch:
    tokens: torch.Tensor
    mask: torch.Tensor
    x_noisy: torch.Tensor
    sigma: torch.Tensor
    clean_tokens: torch.Tensor
    x0: torch.Tensor
    t: torch.Tensor


@dataclass(frozen=True)
class LossReport:
    step: int
    l_text: float
    l_num: float
    lam: float
    total: float

    @property
    def finite(self):
        return all(math.isfinite(v) for v in (self.l_text, self.l_num, self.total))

    def to_dict(self):
        return asdict(self)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"Non-finite loss at step {report.step}: {report.to_dict()}")


def lambda_weight(s, lambda_max=LAMBDA_MAX, s_warm=S_WARM):
    if s < 0:
        raise ValueError(f"Step must be non-negative, got {s}")
    if s_warm <= 0:
        return lambda_max
    return lambda_max * min(1.0, s / s_warm)


def sample_times(batch_size, generator=None, device='cpu', dtype=torch.float32):
    return torch.rand(batch_size, generator=generator, device=device, dtype=dtype)


def forward_noise_numeric(x0, t, noise, generator=None, eps=None):
    """x_hat = x0 + sigma_j(t) * eps with each feature's own schedule.

    Returns (x_hat, sigma), both (B, M).
    """
    sigma = noise(t)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, device=x0.device, dtype=x0.dtype)
    return x0 + sigma.to(x0.dtype) * eps, sigma


def forward_mask_text(tokens, t, layout, mask_id, generator=None, mask_schedule=None):
    """Mask each generation position with probability 1 - alpha_bar(t).

    Prompt and [NUM] positions are never touched. Returns (masked, mask).
    """
    mask_schedule = mask_schedule or MaskSchedule()
    positions = torch.tensor(layout.generation_positions, dtype=torch.long, device=tokens.device)
    maskable = torch.zeros(tokens.shape[1], dtype=torch.bool, device=tokens.device)
    maskable[positions] = True
    p_mask = 1.0 - mask_schedule.alpha_bar(t.double()).to(torch.float64)
    u = torch.rand(tokens.shape, generator=generator, device=tokens.device, dtype=torch.float64)
    mask = (u < p_mask[:, None]) & maskable[None, :]
    return tokens.masked_fill(mask, mask_id), mask


def corrupt(tokens, x0, layout, noise, mask_id, generator=None, mask_schedule=None, t=None):
    if t is None:
        t = sample_times(tokens.shape[0], generator, tokens.device, x0.dtype)
    masked, mask = forward_mask_text(tokens, t, layout, mask_id, generator, mask_schedule)
    x_noisy, sigma = forward_noise_numeric(x0, t, noise, generator)
    return NoisyBatch(
        tokens=masked, mask=mask, x_noisy=x_noisy, sigma=sigma,
        clean_tokens=tokens, x0=x0, t=t,
    )


def text_loss(logits, clean_tokens, mask, t=None, mode=TextLoss.PLAIN):
    """Cross-entropy summed over masked positions, averaged over records."""
    if mode not in TextLoss.CHOICES:
        raise ValueError(f"Unknown text loss '{mode}'")
    ce = F.cross_entropy(logits.transpose(1, 2), clean_tokens, reduction='none')
    per_record = (ce * mask.to(ce.dtype)).sum(dim=1)
    if mode == TextLoss.ELBO:
        per_record = per_record / t.to(ce.dtype).clamp_min(ELBO_T_FLOOR)
    return per_record.mean()


def numeric_loss(x_pred, x0):
    """Squared error summed over features, averaged over records."""
    if x0.shape[1] == 0:
        return x_pred.new_zeros(())
    return ((x_pred - x0.to(x_pred.dtype)) ** 2).sum(dim=1).mean()


def compute_loss(denoiser, batch, step, lambda_max=LAMBDA_MAX, s_warm=S_WARM,
                 text_mode=TextLoss.PLAIN):
    logits, x_pred = denoiser.denoise(batch.tokens, batch.x_noisy, batch.sigma)
    l_text = text_loss(logits, batch.clean_tokens, batch.mask, batch.t, text_mode)
    l_num = numeric_loss(x_pred, batch.x0)
    lam = lambda_weight(step, lambda_max, s_warm)
    total = l_text + lam * l_num
    report = LossReport(
        step=step, l_text=float(l_text), l_num=float(l_num), lam=lam, total=float(total),
    )
    return total, report
