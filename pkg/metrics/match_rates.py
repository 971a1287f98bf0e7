"""
Cross-field consistency rates.

MathExpr rows are checked by parsing the LaTeX back into operators and
literals; ProfileBio rows by matching the biography against its template
and the descriptor bins.
"""
import logging
import math
import re
import string

import numpy as np

from tabular.generators import (
    AGE_BINS, BIOGRAPHY_TEMPLATE, SALARY_BINS, UNARY_OPERATORS, pronoun_for,
)

logger = logging.getLogger(__name__)

EXP_DELTA = 0.07
BIO_DELTA = 0.05
SENSITIVITY_DELTAS = (0.01, 0.03, 0.05, 0.07, 0.10)

NUMBER = r'(\d+(?:\.\d+)?)'
UNARY_PATTERNS = {
    'none': re.compile(rf'{NUMBER}'),
    'log': re.compile(rf'\\log\({NUMBER}\)'),
    'exp': re.compile(rf'(?:\\exp\({NUMBER}\)|e\^\{{{NUMBER}\}})'),
    'sqrt': re.compile(rf'\\sqrt\{{{NUMBER}\}}'),
    'sin': re.compile(rf'\\sin\({NUMBER}\)'),
    'cos': re.compile(rf'\\cos\({NUMBER}\)'),
    'tan': re.compile(rf'\\tan\({NUMBER}\)'),
    'square': re.compile(rf'\({NUMBER}\)\^2'),
    'cube': re.compile(rf'\({NUMBER}\)\^3'),
}
BINARY_SEPARATORS = {' + ': 'add', ' - ': 'sub', ' \\times ': 'mul'}


def parse_unary(text):
    for operator in UNARY_OPERATORS:
        match = UNARY_PATTERNS[operator].fullmatch(text.strip())
        if match:
            literal = next(g for g in match.groups() if g is not None)
            return operator, float(literal)
    return None


def _braced(text, start):
    """Content of the {...} group opening at `start`, and the index after it."""
    if start >= len(text) or text[start] != '{':
        return None, None
    depth = 0
    for i in range(start, len(text)):
        if text[i] == '{':
            depth += 1
        elif text[i] == '}':
            depth -= 1
            if depth == 0:
                return text[start + 1:i], i + 1
    return None, None


def _top_level_split(text):
    depth, found = 0, []
    for i, ch in enumerate(text):
        if ch in '({':
            depth += 1
        elif ch in ')}':
            depth -= 1
        elif depth == 0:
            for separator, operator in BINARY_SEPARATORS.items():
                if text.startswith(separator, i):
                    found.append((i, separator, operator))
    if len(found) != 1:
        return None
    i, separator, operator = found[0]
    return text[:i], text[i + len(separator):], operator


def parse_latex(latex):
    """Parse a rendered expression into (o1, x1, o2, x2, o3); None if off-grammar."""
    if not isinstance(latex, str):
        return None
    latex = latex.strip()
    if latex.startswith('\\frac'):
        numerator, end = _braced(latex, len('\\frac'))
        if numerator is None:
            return None
        denominator, end = _braced(latex, end)
        if denominator is None or end != len(latex):
            return None
        left, right, operator = numerator, denominator, 'div'
    else:
        parts = _top_level_split(latex)
        if parts is None:
            return None
        left, right, operator = parts
    left, right = parse_unary(left), parse_unary(right)
    if left is None or right is None:
        return None
    return left[0], left[1], right[0], right[1], operator


def extract_literals(latex):
    """(x1, x2) literals of a well-formed expression, None otherwise."""
    parsed = parse_latex(latex)
    return None if parsed is None else (parsed[1], parsed[3])


def within_tolerance(literal, value, delta):
    if value == 0:
        return abs(literal - value) <= delta
    return abs(literal - value) / abs(value) <= delta


def _operators_match(row, parsed=None):
    if parsed is None:
        parsed = parse_latex(row['latex_expression'])
    return parsed is not None and (parsed[0], parsed[2], parsed[4]) == (
        row['operation_x1'], row['operation_x2'], row['operation_between']
    )


def op_match_rate(table):
    records = table.records()
    if not records:
        raise ValueError("Match rates need at least one row")
    return float(np.mean([_operators_match(row) for row in records]))


def _expression_matches(row, delta):
    parsed = parse_latex(row['latex_expression'])
    if not _operators_match(row, parsed):
        return False
    return (
        within_tolerance(parsed[1], float(row['x1']), delta)
        and within_tolerance(parsed[3], float(row['x2']), delta)
    )


def expr_match_rate(table, delta=EXP_DELTA):
    records = table.records()
    if not records:
        raise ValueError("Match rates need at least one row")
    return float(np.mean([_expression_matches(row, delta) for row in records]))


def expr_match_sensitivity(table, deltas=SENSITIVITY_DELTAS):
    return {delta: expr_match_rate(table, delta) for delta in deltas}


# ProfileBio

def _template_pattern():
    pattern, seen = '', set()
    for literal, slot, _, _ in string.Formatter().parse(BIOGRAPHY_TEMPLATE):
        pattern += re.escape(literal)
        if slot is None:
            continue
        if slot in seen:
            pattern += f'(?P={slot})'
        else:
            pattern += f'(?P<{slot}>.+?)'
            seen.add(slot)
    return re.compile(pattern)


BIOGRAPHY_PATTERN = _template_pattern()


def _bin_width(low, high):
    return None if low is None or high is None else high - low + 1


def _distance(value, low, high):
    if low is not None and value < low:
        return low - value
    if high is not None and value > high:
        return value - high
    return 0


def accepted_descriptors(value, bins, delta=BIO_DELTA):
    """Descriptors a value may carry: its own bin plus neighbours within the boundary slack.

    slack = max(1, ceil(delta * width)) integer steps, width being the
    narrowest finite bin on either side of the boundary.
    """
    accepted = set()
    for i, (low, high, descriptor) in enumerate(bins):
        distance = _distance(value, low, high)
        if distance == 0:
            accepted.add(descriptor)
            continue
        neighbour = i + 1 if value > (high if high is not None else value) else i - 1
        if not 0 <= neighbour < len(bins):
            continue
        widths = [w for w in (_bin_width(low, high), _bin_width(*bins[neighbour][:2])) if w is not None]
        slack = max(1, math.ceil(delta * min(widths))) if widths else 1
        if distance <= slack:
            accepted.add(descriptor)
    return accepted


def biography_matches(row, delta=BIO_DELTA):
    match = BIOGRAPHY_PATTERN.fullmatch(str(row['biography']))
    if match is None:
        return False
    slots = match.groupdict()
    for name in ('sex', 'birth_state', 'college', 'degree', 'occupation'):
        if slots[name] != str(row[name]):
            return False
    if slots['pronoun'] != pronoun_for(row['sex']):
        return False
    if slots['age_desc'] not in accepted_descriptors(float(row['age']), AGE_BINS, delta):
        return False
    return slots['salary_desc'] in accepted_descriptors(float(row['salary']), SALARY_BINS, delta)


def bio_match_rate(table, delta=BIO_DELTA):
    records = table.records()
    if not records:
        raise ValueError("Match rates need at least one row")
    return float(np.mean([biography_matches(row, delta) for row in records]))


def dataset_match_rates(table):
    """Match rates applicable to the table's dataset, plus the Exp-MR delta sweep."""
    if len(table) == 0:
        return {}, {}
    if table.schema.name == 'mathexpr':
        return (
            {'Op-MR': op_match_rate(table), 'Exp-MR': expr_match_rate(table)},
            expr_match_sensitivity(table),
        )
    if table.schema.name == 'profilebio':
        return {'Bio-MR': bio_match_rate(table)}, {}
    return {}, {}
