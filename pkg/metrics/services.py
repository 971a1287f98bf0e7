"""
Shape and Trend fidelity metrics.

Shape averages a per-column marginal error (KST for numerical, TVD for
categorical columns). Trend averages a per-pair dependency error over all
structured column pairs. Free-text columns enter neither; they are checked
by the match rates instead.
"""
from dataclasses import dataclass, field
from itertools import combinations
import logging

import numpy as np
import pandas as pd
from scipy.stats import ks_2samp

from tabular.schema import ColumnKind, SchemaError, check_same_schema

from .match_rates import dataset_match_rates

logger = logging.getLogger(__name__)

QUARTILES = (0.25, 0.5, 0.75)


def _nonempty(*columns):
    for column in columns:
        if len(column) == 0:
            raise ValueError("Metric columns must be nonempty")


def kst(real_column, synth_column):
    """Two-sample Kolmogorov-Smirnov statistic sup |F_r - F_s|."""
    _nonempty(real_column, synth_column)
    real = np.asarray(real_column, dtype=np.float64)
    synth = np.asarray(synth_column, dtype=np.float64)
    return float(ks_2samp(real, synth).statistic)


def _frequencies(column):
    return pd.Series(np.asarray(column, dtype=object)).value_counts(normalize=True, sort=False)


def tvd(real_column, synth_column):
    """Half the L1 distance between category frequency tables."""
    _nonempty(real_column, synth_column)
    real, synth = _frequencies(real_column), _frequencies(synth_column)
    real, synth = real.align(synth, fill_value=0.0)
    return float(0.5 * np.abs(real - synth).sum())


def column_shapes(real, synth):
    check_same_schema(real, synth)
    errors = {}
    for spec in real.schema.structured:
        if spec.kind == ColumnKind.NUMERICAL:
            errors[spec.name] = kst(real.column(spec.name), synth.column(spec.name))
        else:
            errors[spec.name] = tvd(real.column(spec.name), synth.column(spec.name))
    return errors


def _check_declared(real, schema):
    if schema is not None and schema.schema_hash != real.schema.schema_hash:
        raise SchemaError(f"Tables do not follow schema '{schema.name}'")


def shape(real, synth, schema=None):
    _check_declared(real, schema)
    errors = column_shapes(real, synth)
    if not errors:
        raise ValueError("Shape needs at least one structured column")
    return float(np.mean(list(errors.values())))


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def pearson_pair(real_x, real_y, synth_x, synth_y):
    """Half the absolute correlation gap, or None if any column is constant."""
    rho_real, rho_synth = pearson(real_x, real_y), pearson(synth_x, synth_y)
    if rho_real is None or rho_synth is None:
        return None
    return 0.5 * abs(rho_real - rho_synth)


def pearson_score(real, synth, columns):
    """Mean pearson_pair over unordered pairs of `columns`; skipped pairs are logged.

    Returns None when every pair was skipped.
    """
    if len(columns) < 2:
        raise ValueError("pearson_score needs at least two numerical columns")
    terms = []
    for a, b in combinations(columns, 2):
        term = pearson_pair(real.column(a), real.column(b), synth.column(a), synth.column(b))
        if term is None:
            logger.warning(f"Skipping pair ({a}, {b}): constant column")
            continue
        terms.append(term)
    return float(np.mean(terms)) if terms else None


def contingency_score(real_a, real_b, synth_a, synth_b):
    """Half the L1 distance between joint category frequencies."""
    _nonempty(real_a, synth_a)
    real = pd.crosstab(np.asarray(real_a, dtype=object), np.asarray(real_b, dtype=object), normalize=True)
    synth = pd.crosstab(np.asarray(synth_a, dtype=object), np.asarray(synth_b, dtype=object), normalize=True)
    real, synth = real.align(synth, fill_value=0.0)
    return float(0.5 * np.abs(real.fillna(0.0) - synth.fillna(0.0)).to_numpy().sum())


def quartile_bins(real_values, values):
    """Bin index of each value against the real data's quartile edges."""
    edges = np.unique(np.quantile(np.asarray(real_values, dtype=np.float64), QUARTILES))
    return np.searchsorted(edges, np.asarray(values, dtype=np.float64), side='left')


def pair_trend(real, synth, a, b):
    kind_a, kind_b = real.schema.column(a).kind, real.schema.column(b).kind
    if kind_a == ColumnKind.NUMERICAL and kind_b == ColumnKind.NUMERICAL:
        return pearson_pair(real.column(a), real.column(b), synth.column(a), synth.column(b))
    real_a, synth_a = real.column(a), synth.column(a)
    real_b, synth_b = real.column(b), synth.column(b)
    if kind_a == ColumnKind.NUMERICAL:
        real_a, synth_a = quartile_bins(real_a, real_a), quartile_bins(real_a, synth_a)
    if kind_b == ColumnKind.NUMERICAL:
        real_b, synth_b = quartile_bins(real_b, real_b), quartile_bins(real_b, synth_b)
    return contingency_score(real_a, real_b, synth_a, synth_b)


def pair_trends(real, synth):
    check_same_schema(real, synth)
    names = [spec.name for spec in real.schema.structured]
    return {(a, b): pair_trend(real, synth, a, b) for a, b in combinations(names, 2)}


def trend(real, synth, schema=None):
    _check_declared(real, schema)
    terms = pair_trends(real, synth)
    if not terms:
        raise ValueError("Trend needs at least two structured columns")
    scored = [v for v in terms.values() if v is not None]
    if not scored:
        raise ValueError("Every column pair was skipped")
    return float(np.mean(scored))


def _shown(value, missing='n/a'):
    return missing if value is None else f"{100 * value:6.2f}%"


@dataclass
class FidelityReport:
    dataset: str
    n_real: int
    n_synth: int
    shape: float | None
    trend: float | None
    column_shapes: dict = field(default_factory=dict)
    pair_trends: dict = field(default_factory=dict)
    match_rates: dict = field(default_factory=dict)
    exp_mr_sensitivity: dict = field(default_factory=dict)
    invalid_records: int = 0

    @property
    def skipped_pairs(self):
        return [f"{a}|{b}" for (a, b), v in self.pair_trends.items() if v is None]

    def to_dict(self):
        def percent(value):
            return None if value is None else round(100.0 * value, 2)

        return {
            'dataset': self.dataset,
            'n_real': self.n_real,
            'n_synth': self.n_synth,
            'invalid_records': self.invalid_records,
            'shape': self.shape,
            'trend': self.trend,
            'shape_percent': percent(self.shape),
            'trend_percent': percent(self.trend),
            'column_shapes': self.column_shapes,
            'pair_trends': {f"{a}|{b}": v for (a, b), v in self.pair_trends.items()},
            'skipped_pairs': self.skipped_pairs,
            'match_rates': self.match_rates,
            'match_rates_percent': {k: percent(v) for k, v in self.match_rates.items()},
            'exp_mr_sensitivity': {str(k): v for k, v in self.exp_mr_sensitivity.items()},
        }

    def render(self):
        lines = [
            f"Fidelity report: {self.dataset} ({self.n_synth} synthetic vs {self.n_real} real rows)",
            f"  Shape error  {_shown(self.shape)}",
            f"  Trend error  {_shown(self.trend)}",
        ]
        for name, rate in self.match_rates.items():
            lines.append(f"  {name:<12} {100 * rate:6.2f}%")
        if self.exp_mr_sensitivity:
            sweep = ', '.join(f"{delta:.2f}: {100 * rate:.2f}%" for delta, rate in self.exp_mr_sensitivity.items())
            lines.append(f"  Exp-MR by delta  {sweep}")
        lines.append(f"  Invalid records  {self.invalid_records}")
        lines.append("  Column shape errors:")
        for name, value in self.column_shapes.items():
            lines.append(f"    {name:<24} {100 * value:6.2f}%")
        lines.append("  Pair trend errors:")
        for (a, b), value in self.pair_trends.items():
            shown = _shown(value, 'skipped')
            lines.append(f"    {a + ' / ' + b:<40} {shown}")
        return '\n'.join(lines) + '\n'


def evaluate(real, synth, invalid_records=0):
    """Full FidelityReport, including the match rates the dataset supports."""
    check_same_schema(real, synth)
    if len(synth) == 0:
        logger.warning(
            f"No valid synthetic records for '{real.schema.name}' "
            f"({invalid_records} invalid), nothing to score"
        )
        return FidelityReport(
            dataset=real.schema.name, n_real=len(real), n_synth=0, shape=None, trend=None,
            invalid_records=invalid_records,
        )
    shapes = column_shapes(real, synth)
    trends = pair_trends(real, synth)
    scored = [v for v in trends.values() if v is not None]
    if not scored:
        logger.warning(f"Every column pair of '{real.schema.name}' was skipped, trend is not reported")
    report = FidelityReport(
        dataset=real.schema.name,
        n_real=len(real),
        n_synth=len(synth),
        shape=float(np.mean(list(shapes.values()))) if shapes else None,
        trend=float(np.mean(scored)) if scored else None,
        column_shapes=shapes,
        pair_trends=trends,
        invalid_records=invalid_records,
    )
    rates, sweep = dataset_match_rates(synth)
    report.match_rates = rates
    report.exp_mr_sensitivity = sweep
    logger.info(f"Evaluated '{real.schema.name}': shape {report.shape}, trend {report.trend}")
    return report
