import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from .schema import ColumnKind, SchemaError, Table, TableSchema

logger = logging.getLogger(__name__)


def sidecar_path(csv_path, suffix):
    csv_path = Path(csv_path)
    return csv_path.with_name(f"{csv_path.stem}.{suffix}.json")


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write('\n')


def read_json(path):
    with open(path, 'r', encoding='utf-8') as handle:
        return json.load(handle)


def save_schema(schema, path):
    write_json(path, schema.to_dict())


def load_schema(path):
    return TableSchema.from_dict(read_json(path))


def _formatted(table):
    frame = table.frame.copy()
    for spec in table.schema.numerical:
        values = frame[spec.name]
        if spec.integer and values.notna().all():
            frame[spec.name] = np.rint(values.astype(np.float64)).astype(np.int64)
        elif spec.decimals is not None:
            frame[spec.name] = values.astype(np.float64).round(spec.decimals)
    return frame


def write_table(table, csv_path, write_schema=True):
    """Write a table as quoted UTF-8 CSV plus its schema sidecar."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    _formatted(table).to_csv(
        csv_path, index=False, encoding='utf-8', quoting=csv.QUOTE_NONNUMERIC,
        lineterminator='\n',
    )
    if write_schema:
        save_schema(table.schema, sidecar_path(csv_path, 'schema'))
    logger.info(f"Wrote {len(table)} rows to {csv_path}")
    return csv_path


def read_table(csv_path, schema=None):
    csv_path = Path(csv_path)
    if schema is None:
        schema_file = sidecar_path(csv_path, 'schema')
        if not schema_file.exists():
            raise SchemaError(f"No schema given and no sidecar found at {schema_file}")
        schema = load_schema(schema_file)
    dtypes = {c.name: str for c in schema.columns if c.kind != ColumnKind.NUMERICAL}
    frame = pd.read_csv(
        csv_path, encoding='utf-8', dtype=dtypes, keep_default_na=False,
        na_values={c.name: ['', 'NaN', 'nan'] for c in schema.numerical},
    )
    for spec in schema.numerical:
        frame[spec.name] = pd.to_numeric(frame[spec.name], errors='coerce')
    return Table(schema, frame)


def split(table, train_fraction=0.9, seed=0):
    """Seeded disjoint split into (train, validation)."""
    if len(table) == 0:
        raise ValueError("Cannot split an empty table")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(table))
    n_train = int(round(train_fraction * len(table)))
    train_idx, val_idx = np.sort(order[:n_train]), np.sort(order[n_train:])
    frame = table.frame
    return (
        Table(table.schema, frame.iloc[train_idx].reset_index(drop=True)),
        Table(table.schema, frame.iloc[val_idx].reset_index(drop=True)),
    )
