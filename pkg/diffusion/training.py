"""
Training loop for the joint denoiser.

Batches, timesteps, masks, noise and dropout for step s are all drawn from
streams derived from (seed, s) or (seed, epoch), so stopping after any step
and resuming from the saved state gives the same parameters as an
uninterrupted run.
"""
from dataclasses import dataclass, asdict
import json
import logging
import math
import time
from pathlib import Path

import torch

from schedules.services import MaskSchedule

from .services import (
    LAMBDA_MAX, S_WARM, NonFiniteLossError, TextLoss, compute_loss, corrupt,
)
from .utils import derive_seed, make_generator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 2e-4
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup_ratio: float = 0.1
    grad_clip: float = 1.0
    lambda_max: float = LAMBDA_MAX
    s_warm: int = S_WARM
    text_loss: str = TextLoss.PLAIN
    seed: int = 0
    checkpoint_every: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, 'betas', tuple(self.betas))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.text_loss not in TextLoss.CHOICES:
            raise ValueError(f"Unknown text loss '{self.text_loss}'")

    def to_dict(self):
        data = asdict(self)
        data['betas'] = list(self.betas)
        return data


def warmup_linear_decay(total_steps, warmup_ratio):
    warmup = int(math.ceil(warmup_ratio * total_steps))

    def factor(step):
        if warmup and step < warmup:
            return (step + 1) / warmup
        remaining = max(total_steps - warmup, 1)
        return max(0.0, (total_steps - step) / remaining)

    return factor


class Trainer:
    def __init__(self, denoiser, config, tokens, numbers, layout, mask_id,
                 mask_schedule=None, out_dir=None, validation=None, on_checkpoint=None):
        if tokens.shape[0] != numbers.shape[0]:
            raise ValueError("tokens and numbers must have the same number of records")
        self.denoiser = denoiser
        self.config = config
        self.tokens = tokens.to(denoiser.device)
        self.numbers = torch.as_tensor(numbers, dtype=denoiser.dtype, device=denoiser.device)
        self.layout = layout
        self.mask_id = mask_id
        self.mask_schedule = mask_schedule or MaskSchedule()
        self.out_dir = Path(out_dir) if out_dir else None
        self.validation = validation
        self.on_checkpoint = on_checkpoint

        self.steps_per_epoch = math.ceil(tokens.shape[0] / config.batch_size)
        self.total_steps = config.epochs * self.steps_per_epoch
        if config.max_steps is not None:
            self.total_steps = min(self.total_steps, config.max_steps)
        self.step = 0
        self.history = []

        self.optimizer = torch.optim.AdamW(
            denoiser.trainable_parameters(), lr=config.lr, betas=config.betas,
            eps=config.eps, weight_decay=config.weight_decay,
        )
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, warmup_linear_decay(self.total_steps, config.warmup_ratio),
        )

    def _batch_indices(self, step):
        epoch, position = divmod(step, self.steps_per_epoch)
        order = torch.randperm(
            self.tokens.shape[0], generator=make_generator(derive_seed(self.config.seed, 'epoch', epoch))
        )
        size = self.config.batch_size
        return order[position * size:(position + 1) * size]

    def training_step(self, step):
        index = self._batch_indices(step)
        generator = make_generator(derive_seed(self.config.seed, 'step', step), self.tokens.device)
        torch.manual_seed(derive_seed(self.config.seed, 'dropout', step))
        self.denoiser.train()
        batch = corrupt(
            self.tokens[index], self.numbers[index], self.layout, self.denoiser.noise,
            self.mask_id, generator, self.mask_schedule,
        )
        total, report = compute_loss(
            self.denoiser, batch, step, self.config.lambda_max, self.config.s_warm,
            self.config.text_loss,
        )
        if not report.finite:
            logger.error(f"Non-finite loss: {report.to_dict()}")
            raise NonFiniteLossError(report)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.denoiser.trainable_parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.scheduler.step()
        return report

    @torch.no_grad()
    def validation_loss(self):
        tokens, numbers = self.validation
        tokens = tokens.to(self.denoiser.device)
        numbers = torch.as_tensor(numbers, dtype=self.denoiser.dtype, device=self.denoiser.device)
        generator = make_generator(derive_seed(self.config.seed, 'validation'), tokens.device)
        self.denoiser.eval()
        totals = []
        for start in range(0, tokens.shape[0], self.config.batch_size):
            batch = corrupt(
                tokens[start:start + self.config.batch_size],
                numbers[start:start + self.config.batch_size],
                self.layout, self.denoiser.noise, self.mask_id, generator, self.mask_schedule,
            )
            _, report = compute_loss(
                self.denoiser, batch, self.step, self.config.lambda_max, self.config.s_warm,
                self.config.text_loss,
            )
            totals.append(report.total)
        return sum(totals) / len(totals)

    def _log(self, report, started):
        record = {
            'step': report.step,
            'l_text': report.l_text,
            'l_num': report.l_num,
            'lambda': report.lam,
            'total': report.total,
            'lr': self.scheduler.get_last_lr()[0],
            'wall_time': time.time() - started,
        }
        self.history.append(record)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / 'train_log.jsonl', 'a', encoding='utf-8') as handle:
                handle.write(json.dumps(record) + '\n')

    def run(self, until=None):
        """Train up to step `until` (default: all steps). Returns the last LossReport."""
        until = self.total_steps if until is None else min(until, self.total_steps)
        started = time.time()
        report = None
        logger.info(f"Training from step {self.step} to {until} of {self.total_steps}")
        while self.step < until:
            report = self.training_step(self.step)
            self.step += 1
            self._log(report, started)
            if self.step % self.steps_per_epoch == 0:
                epoch = self.step // self.steps_per_epoch
                message = f"Epoch {epoch}: loss {report.total:.4f} (text {report.l_text:.4f}, num {report.l_num:.4f})"
                if self.validation is not None:
                    message += f", validation {self.validation_loss():.4f}"
                logger.info(message)
            if self.on_checkpoint and self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                self.on_checkpoint(self)
        if self.on_checkpoint and self.step == until:
            self.on_checkpoint(self)
        return report

    def state_dict(self):
        return {
            'step': self.step,
            'model': self.denoiser.state_dict(),
            'optimizer': self.optimizer.state_dict(),
            'scheduler': self.scheduler.state_dict(),
        }

    def load_state_dict(self, state):
        self.denoiser.load_state_dict(state['model'])
        self.optimizer.load_state_dict(state['optimizer'])
        self.scheduler.load_state_dict(state['scheduler'])
        self.step = state['step']
        logger.info(f"Resumed trainer at step {self.step}")
