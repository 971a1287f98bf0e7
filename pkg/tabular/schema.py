from dataclasses import dataclass, field, asdict
import hashlib
import json
import logging

import numpy as np
import pandas as pd
from django.db import models

logger = logging.getLogger(__name__)

MISSING_CATEGORY = '<missing>'


class SchemaError(ValueError):
    pass


class ColumnKind(models.TextChoices):
    NUMERICAL = 'numerical', 'Numerical'
    CATEGORICAL = 'categorical', 'Categorical'
    TEXT = 'text', 'Text'


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    categories: tuple = ()
    integer: bool = False
    decimals: int | None = None
    description: str = ''

    def __post_init__(self):
        if self.kind not in ColumnKind.values:
            raise SchemaError(f"Column '{self.name}' has unknown kind '{self.kind}'")
        if self.kind == ColumnKind.CATEGORICAL and not self.categories:
            raise SchemaError(f"Categorical column '{self.name}' needs a category vocabulary")
        object.__setattr__(self, 'categories', tuple(self.categories))


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, 'columns', tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"Duplicate column names in schema '{self.name}'")

    @property
    def names(self):
        return [c.name for c in self.columns]

    def column(self, name):
        for spec in self.columns:
            if spec.name == name:
                return spec
        raise SchemaError(f"Unknown column '{name}'")

    def _of_kind(self, kind):
        return [c for c in self.columns if c.kind == kind]

    @property
    def numerical(self):
        return self._of_kind(ColumnKind.NUMERICAL)

    @property
    def categorical(self):
        return self._of_kind(ColumnKind.CATEGORICAL)

    @property
    def text(self):
        return self._of_kind(ColumnKind.TEXT)

    @property
    def structured(self):
        return [c for c in self.columns if c.kind != ColumnKind.TEXT]

    def to_dict(self):
        return {'name': self.name, 'columns': [asdict(c) for c in self.columns]}

    @classmethod
    def from_dict(cls, data):
        columns = []
        for raw in data['columns']:
            raw = dict(raw)
            raw['categories'] = tuple(raw.get('categories', ()))
            columns.append(ColumnSpec(**raw))
        return cls(name=data['name'], columns=tuple(columns))

    @property
    def schema_hash(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def describe(self):
        """One-line schema description used as the row prompt."""
        parts = [f"{c.name} {c.kind}" for c in self.columns]
        return f"table {self.name} : " + " , ".join(parts)


@dataclass
class Table:
    schema: TableSchema
    frame: pd.DataFrame

    def __post_init__(self):
        missing = [n for n in self.schema.names if n not in self.frame.columns]
        if missing:
            raise SchemaError(f"Table is missing columns {missing}")
        self.frame = self.frame[self.schema.names].reset_index(drop=True)

    def __len__(self):
        return len(self.frame)

    def records(self):
        return self.frame.to_dict(orient='records')

    def column(self, name):
        return self.frame[name]

    def copy(self):
        return Table(self.schema, self.frame.copy())


def check_same_schema(real, synth):
    if real.schema.schema_hash != synth.schema.schema_hash:
        raise SchemaError(
            f"Schema mismatch: '{real.schema.name}' vs '{synth.schema.name}'"
        )


def preprocess(table):
    """Mean-impute numerical columns and give missing categories their own value."""
    frame = table.frame.copy()
    columns = list(table.schema.columns)
    for i, spec in enumerate(columns):
        if spec.kind == ColumnKind.NUMERICAL:
            values = pd.to_numeric(frame[spec.name], errors='coerce')
            if values.notna().sum() == 0:
                raise SchemaError(f"Numerical column '{spec.name}' has no observed values")
            if values.isna().any():
                logger.info(f"Imputing {int(values.isna().sum())} missing values in '{spec.name}' with the column mean")
            frame[spec.name] = values.fillna(values.mean()).astype(np.float64)
        elif spec.kind == ColumnKind.CATEGORICAL:
            values = frame[spec.name]
            missing = values.isna() | (values.astype(str) == '')
            if missing.any():
                frame[spec.name] = values.astype(object).where(~missing, MISSING_CATEGORY)
                if MISSING_CATEGORY not in spec.categories:
                    columns[i] = ColumnSpec(
                        name=spec.name, kind=spec.kind,
                        categories=spec.categories + (MISSING_CATEGORY,),
                        integer=spec.integer, decimals=spec.decimals,
                        description=spec.description,
                    )
        else:
            frame[spec.name] = frame[spec.name].fillna('').astype(str)
    schema = TableSchema(name=table.schema.name, columns=tuple(columns))
    return Table(schema, frame)
