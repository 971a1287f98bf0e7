"""
Fixed token layout shared by every row of a table.

    [BOS] prompt... [SEP] | col_1 span | ... | col_k span | [NUM] ... [NUM]

Categorical and text columns get fixed-width spans padded with [PAD];
numerical columns get one [NUM] placeholder each, always at the same
positions.
"""
from dataclasses import dataclass, asdict
import logging

import numpy as np
import torch

from tabular.schema import ColumnKind

logger = logging.getLogger(__name__)


class SerializationError(ValueError):
    pass


class TruncationPolicy:
    FAIL = 'fail'
    TRUNCATE = 'truncate'
    CHOICES = (FAIL, TRUNCATE)


@dataclass(frozen=True)
class ColumnSpan:
    name: str
    kind: str
    offset: int
    width: int


@dataclass(frozen=True)
class TokenLayout:
    prompt: tuple
    spans: tuple
    numeric_names: tuple

    @property
    def prompt_length(self):
        return len(self.prompt)

    @property
    def generation_length(self):
        """G: number of positions the sampler has to fill."""
        return sum(span.width for span in self.spans)

    @property
    def length(self):
        return self.prompt_length + self.generation_length + len(self.numeric_names)

    @property
    def numeric_positions(self):
        start = self.prompt_length + self.generation_length
        return list(range(start, start + len(self.numeric_names)))

    @property
    def generation_positions(self):
        return list(range(self.prompt_length, self.prompt_length + self.generation_length))

    def span(self, name):
        for span in self.spans:
            if span.name == name:
                return span
        raise KeyError(name)

    def template(self, vocabulary, fill_id):
        """Row of ids with the prompt and [NUM] slots set and `fill_id` elsewhere."""
        row = [fill_id] * self.length
        row[:self.prompt_length] = self.prompt
        for position in self.numeric_positions:
            row[position] = vocabulary.num_id
        return row

    def to_dict(self):
        return {
            'prompt': list(self.prompt),
            'spans': [asdict(span) for span in self.spans],
            'numeric_names': list(self.numeric_names),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            prompt=tuple(data['prompt']),
            spans=tuple(ColumnSpan(**span) for span in data['spans']),
            numeric_names=tuple(data['numeric_names']),
        )


def build_layout(table, vocabulary, widths=None):
    """Size every span to the longest encoding seen in `table` (and in the category list)."""
    schema = table.schema
    prompt = (vocabulary.bos_id, *vocabulary.encode(schema.describe()), vocabulary.sep_id)
    widths = dict(widths or {})
    spans, offset = [], len(prompt)
    for spec in schema.columns:
        if spec.kind == ColumnKind.NUMERICAL:
            continue
        if spec.name not in widths:
            values = list(table.column(spec.name).astype(str))
            if spec.kind == ColumnKind.CATEGORICAL:
                values += list(spec.categories)
            widths[spec.name] = max([len(vocabulary.encode(v)) for v in values] + [1])
        spans.append(ColumnSpan(spec.name, str(spec.kind), offset, widths[spec.name]))
        offset += widths[spec.name]
    layout = TokenLayout(prompt, tuple(spans), tuple(spec.name for spec in schema.numerical))
    logger.info(
        f"Layout for '{schema.name}': prompt {layout.prompt_length}, "
        f"G={layout.generation_length}, {len(layout.numeric_names)} numeric slots"
    )
    return layout


def serialize_record(record, schema, layout, vocabulary, normalizers=None,
                     truncation=TruncationPolicy.FAIL):
    """Record -> (token ids, numeric values in layout order).

    Numeric values are normalized when `normalizers` is given.
    """
    if truncation not in TruncationPolicy.CHOICES:
        raise ValueError(f"Unknown truncation policy '{truncation}'")
    row = layout.template(vocabulary, vocabulary.pad_id)
    for span in layout.spans:
        value = record[span.name]
        value = '' if value is None or (isinstance(value, float) and np.isnan(value)) else str(value)
        if span.kind == ColumnKind.CATEGORICAL:
            categories = schema.column(span.name).categories
            if value not in categories:
                raise SerializationError(f"Unknown category '{value}' for column '{span.name}'")
        ids = vocabulary.encode(value)
        if len(ids) > span.width:
            if truncation == TruncationPolicy.FAIL:
                raise SerializationError(
                    f"Column '{span.name}' needs {len(ids)} tokens, span width is {span.width}"
                )
            ids = ids[:span.width]
        row[span.offset:span.offset + len(ids)] = ids

    numbers = np.array([float(record[name]) for name in layout.numeric_names], dtype=np.float64)
    if normalizers is not None and len(numbers):
        numbers = np.array([
            normalizers[name].normalize([value])[0]
            for name, value in zip(layout.numeric_names, numbers)
        ])
    return row, numbers


def serialize_table(table, layout, vocabulary, normalizers=None,
                    truncation=TruncationPolicy.FAIL):
    """Table -> (LongTensor (N, L), float64 array (N, M))."""
    rows, numbers = [], []
    for record in table.records():
        ids, values = serialize_record(record, table.schema, layout, vocabulary, truncation=truncation)
        rows.append(ids)
        numbers.append(values)
    numbers = np.array(numbers, dtype=np.float64).reshape(len(rows), len(layout.numeric_names))
    if normalizers is not None:
        for j, name in enumerate(layout.numeric_names):
            numbers[:, j] = normalizers[name].normalize(numbers[:, j])
    return torch.tensor(rows, dtype=torch.long), numbers


def decode_span(ids, vocabulary):
    """Content ids followed only by [PAD] -> (text, valid)."""
    specials = vocabulary.special_ids
    content, seen_pad = [], False
    for token in ids:
        if token == vocabulary.pad_id:
            seen_pad = True
        elif seen_pad or token in specials:
            return None, False
        else:
            content.append(token)
    return vocabulary.decode(content), True


def detokenize_row(token_ids, layout, vocabulary, schema):
    """Token row -> (field strings, valid)."""
    token_ids = [int(t) for t in token_ids]
    fields, valid = {}, True
    for span in layout.spans:
        text, ok = decode_span(token_ids[span.offset:span.offset + span.width], vocabulary)
        if ok and span.kind == ColumnKind.CATEGORICAL:
            ok = text in schema.column(span.name).categories
        fields[span.name] = text if ok else None
        valid = valid and ok
    return fields, valid
