"""
Quantile normalization of numerical columns onto a standard normal.
"""
import logging
import math

import numpy as np
from sklearn.preprocessing import QuantileTransformer

logger = logging.getLogger(__name__)

MAX_QUANTILES = 1000


class QuantileNormalizer:
    """Monotone map of one column onto N(0, 1) with a clamped inverse."""

    def __init__(self, transformer=None, minimum=0.0, maximum=0.0, degenerate=False):
        self.transformer = transformer
        self.minimum = float(minimum)
        self.maximum = float(maximum)
        self.degenerate = degenerate

    @property
    def fitted(self):
        return self.degenerate or self.transformer is not None

    def _check(self, values):
        if not self.fitted:
            raise ValueError("Normalizer has not been fitted")
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("Normalizer input must be finite")
        return values

    def normalize(self, values):
        values = self._check(values)
        if self.degenerate:
            return np.zeros_like(values)
        out = self.transformer.transform(values.reshape(-1, 1)).reshape(values.shape)
        return out

    def denormalize(self, values):
        values = self._check(values)
        if self.degenerate:
            return np.full_like(values, self.minimum)
        out = self.transformer.inverse_transform(values.reshape(-1, 1)).reshape(values.shape)
        return np.clip(out, self.minimum, self.maximum)

    def state_dict(self):
        if self.degenerate:
            return {'degenerate': True, 'minimum': self.minimum, 'maximum': self.maximum}
        return {
            'degenerate': False,
            'minimum': self.minimum,
            'maximum': self.maximum,
            'quantiles': self.transformer.quantiles_[:, 0].tolist(),
            'references': self.transformer.references_.tolist(),
        }

    @classmethod
    def from_state(cls, state):
        if state['degenerate']:
            return cls(minimum=state['minimum'], maximum=state['maximum'], degenerate=True)
        quantiles = np.asarray(state['quantiles'], dtype=np.float64)
        transformer = QuantileTransformer(
            n_quantiles=len(quantiles), output_distribution='normal',
        )
        # restore the fitted state without refitting
        transformer.quantiles_ = quantiles.reshape(-1, 1)
        transformer.references_ = np.asarray(state['references'], dtype=np.float64)
        transformer.n_quantiles_ = len(quantiles)
        transformer.n_features_in_ = 1
        return cls(transformer, state['minimum'], state['maximum'])


def fit_normalizer(column_values, seed=0):
    values = np.asarray(column_values, dtype=np.float64)
    if values.size == 0 or np.all(np.isnan(values)):
        raise ValueError("Cannot fit a normalizer on an all-missing column")
    if np.isnan(values).any():
        values = np.where(np.isnan(values), np.nanmean(values), values)
    if not np.all(np.isfinite(values)):
        raise ValueError("Column contains non-finite values")
    if values.size < 2:
        raise ValueError("Need at least 2 values to fit a normalizer")

    minimum, maximum = float(values.min()), float(values.max())
    if math.isclose(minimum, maximum):
        logger.warning(f"Constant column (value {minimum}); normalizer flagged degenerate")
        return QuantileNormalizer(minimum=minimum, maximum=maximum, degenerate=True)

    transformer = QuantileTransformer(
        n_quantiles=min(MAX_QUANTILES, values.size),
        output_distribution='normal',
        subsample=None,
        random_state=seed,
    )
    transformer.fit(values.reshape(-1, 1))
    return QuantileNormalizer(transformer, minimum, maximum)


def normalize(x, normalizer):
    return normalizer.normalize(x)


def denormalize(z, normalizer):
    return normalizer.denormalize(z)
