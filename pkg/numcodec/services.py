"""
Codec pretraining and normalizer bookkeeping for tables.
"""
from dataclasses import dataclass, asdict
import logging

import numpy as np
import torch

from tabular.schema import Table

from .networks import FloatCodec
from .normalizers import QuantileNormalizer, fit_normalizer

logger = logging.getLogger(__name__)

GRID_POINTS = 2001
GRID_RANGE = (-4.0, 4.0)
MEAN_TOLERANCE = 1e-3
MAX_TOLERANCE = 1e-2


@dataclass(frozen=True)
class RoundTripStats:
    mean_error: float
    max_error: float

    def within(self, mean_tolerance=MEAN_TOLERANCE, max_tolerance=MAX_TOLERANCE):
        return self.mean_error <= mean_tolerance and self.max_error <= max_tolerance

    def to_dict(self):
        return asdict(self)


class CodecConvergenceError(RuntimeError):
    def __init__(self, stats):
        self.stats = stats
        super().__init__(
            f"Codec did not converge: mean round-trip error {stats.mean_error:.3e}, "
            f"max {stats.max_error:.3e}"
        )


def default_grid(points=GRID_POINTS, bounds=GRID_RANGE):
    return np.linspace(bounds[0], bounds[1], points)


def roundtrip_error(codec, value_grid):
    dtype = next(codec.parameters()).dtype
    grid = torch.as_tensor(np.asarray(value_grid), dtype=dtype)
    was_training = codec.training
    codec.eval()
    with torch.no_grad():
        errors = (codec(grid) - grid).abs()
    codec.train(was_training)
    return RoundTripStats(mean_error=float(errors.mean()), max_error=float(errors.max()))


def pretrain_codec(r=16, value_grid=None, epochs=3000, rng=0, polish_steps=500,
                   lr=1e-2, strict=True):
    """Fit ENC/DEC to reproduce every grid value, then freeze.

    Runs `epochs` full-batch Adam steps followed by up to `polish_steps`
    L-BFGS iterations, in float64.
    """
    value_grid = default_grid() if value_grid is None else np.asarray(value_grid)
    torch.manual_seed(rng)
    codec = FloatCodec(r).double()
    grid = torch.as_tensor(value_grid, dtype=torch.float64)

    optimizer = torch.optim.Adam(codec.parameters(), lr=lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(epochs, 1))
    codec.train()
    for epoch in range(epochs):
        optimizer.zero_grad()
        loss = torch.mean((codec(grid) - grid) ** 2)
        loss.backward()
        optimizer.step()
        scheduler.step()
        if epoch % 500 == 0:
            logger.debug(f"Codec epoch {epoch}: mse {loss.item():.3e}")

    if polish_steps > 0:
        polish = torch.optim.LBFGS(
            codec.parameters(), lr=1.0, max_iter=polish_steps,
            tolerance_grad=1e-12, tolerance_change=1e-14, history_size=50,
            line_search_fn='strong_wolfe',
        )

        def closure():
            polish.zero_grad()
            loss = torch.mean((codec(grid) - grid) ** 2)
            loss.backward()
            return loss

        polish.step(closure)

    codec.freeze()
    stats = roundtrip_error(codec, value_grid)
    logger.info(
        f"Pretrained codec r={r}: mean error {stats.mean_error:.3e}, max error {stats.max_error:.3e}"
    )
    if not stats.within():
        if strict:
            raise CodecConvergenceError(stats)
        logger.warning(f"Codec above tolerance: {stats}")
    return codec, stats


def save_codec(codec, path):
    torch.save({'latent_dim': codec.latent_dim, 'state_dict': codec.state_dict()}, path)


def load_codec(path):
    payload = torch.load(path, map_location='cpu', weights_only=True)
    codec = FloatCodec(payload['latent_dim']).double()
    codec.load_state_dict(payload['state_dict'])
    return codec.freeze()


def fit_table_normalizers(table: Table, seed=0):
    return {
        spec.name: fit_normalizer(table.column(spec.name).to_numpy(dtype=np.float64), seed=seed)
        for spec in table.schema.numerical
    }


def normalizers_state(normalizers):
    return {name: normalizer.state_dict() for name, normalizer in normalizers.items()}


def normalizers_from_state(state):
    return {name: QuantileNormalizer.from_state(s) for name, s in state.items()}


def normalize_table(table, normalizers):
    """(N, M) array of normalized numerical values in schema order."""
    columns = [
        normalizers[spec.name].normalize(table.column(spec.name).to_numpy(dtype=np.float64))
        for spec in table.schema.numerical
    ]
    if not columns:
        return np.zeros((len(table), 0))
    return np.stack(columns, axis=1)
