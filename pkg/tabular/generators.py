"""
Seedable generators for the MathExpr and ProfileBio benchmarks.

Both generators are pure functions of (n, seed): they draw every column
from a single numpy Generator in a fixed order.
"""
import logging
import math

import numpy as np
import pandas as pd

from .schema import ColumnKind, ColumnSpec, Table, TableSchema

logger = logging.getLogger(__name__)

GENERATOR_VERSION = '1.0'

# MathExpr

UNARY_OPERATORS = ('none', 'log', 'exp', 'sqrt', 'sin', 'cos', 'tan', 'square', 'cube')
BINARY_OPERATORS = ('add', 'sub', 'mul', 'div')

X1_GRID = np.round(np.arange(0, 61) * 0.1, 1)
X2_GRID = np.round(3.0 + np.arange(0, 71) * 0.1, 1)
X1_MEAN, X2_MEAN, X_STD = 3.0, 6.5, 1.0

O1_PRIOR = {'none': 0.18, 'log': 0.16, 'sqrt': 0.13, 'square': 0.12, 'sin': 0.10,
            'cos': 0.10, 'tan': 0.07, 'exp': 0.07, 'cube': 0.07}
O2_PRIOR = {'none': 0.22, 'sin': 0.14, 'cos': 0.14, 'sqrt': 0.12, 'log': 0.10,
            'square': 0.09, 'tan': 0.07, 'exp': 0.06, 'cube': 0.06}
O3_PRIOR = {'add': 0.35, 'mul': 0.30, 'sub': 0.20, 'div': 0.15}

MATHEXPR_SCHEMA = TableSchema(
    name='mathexpr',
    columns=(
        ColumnSpec('x1', ColumnKind.NUMERICAL, decimals=2),
        ColumnSpec('x2', ColumnKind.NUMERICAL, decimals=2),
        ColumnSpec('operation_x1', ColumnKind.CATEGORICAL, categories=UNARY_OPERATORS),
        ColumnSpec('operation_x2', ColumnKind.CATEGORICAL, categories=UNARY_OPERATORS),
        ColumnSpec('operation_between', ColumnKind.CATEGORICAL, categories=BINARY_OPERATORS),
        ColumnSpec('latex_expression', ColumnKind.TEXT),
    ),
)

UNARY_TEMPLATES = {
    'none': '{}',
    'log': '\\log({})',
    'exp': '\\exp({})',
    'sqrt': '\\sqrt{{{}}}',
    'sin': '\\sin({})',
    'cos': '\\cos({})',
    'tan': '\\tan({})',
    'square': '({})^2',
    'cube': '({})^3',
}

BINARY_TEMPLATES = {
    'add': '{} + {}',
    'sub': '{} - {}',
    'mul': '{} \\times {}',
    'div': '\\frac{{{}}}{{{}}}',
}


def grid_gaussian_weights(grid, mean, std):
    """Normal density at the grid points, renormalized."""
    density = np.exp(-0.5 * ((grid - mean) / std) ** 2)
    return density / density.sum()


def _choice(rng, prior, size):
    keys = list(prior)
    probs = np.array([prior[k] for k in keys], dtype=np.float64)
    return np.array(keys, dtype=object)[rng.choice(len(keys), size=size, p=probs / probs.sum())]


def render_unary(value, operator):
    if operator not in UNARY_TEMPLATES:
        raise ValueError(f"Unknown unary operator '{operator}'")
    return UNARY_TEMPLATES[operator].format(f"{value:.2f}")


def render_latex(x1, x2, o1, o2, o3):
    if o3 not in BINARY_TEMPLATES:
        raise ValueError(f"Unknown binary operator '{o3}'")
    return BINARY_TEMPLATES[o3].format(render_unary(x1, o1), render_unary(x2, o2))


def gen_mathexpr(n, seed):
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    x1 = rng.choice(X1_GRID, size=n, p=grid_gaussian_weights(X1_GRID, X1_MEAN, X_STD))
    x2 = rng.choice(X2_GRID, size=n, p=grid_gaussian_weights(X2_GRID, X2_MEAN, X_STD))
    o1 = _choice(rng, O1_PRIOR, n)
    o2 = _choice(rng, O2_PRIOR, n)
    o3 = _choice(rng, O3_PRIOR, n)
    latex = [render_latex(a, b, u, v, w) for a, b, u, v, w in zip(x1, x2, o1, o2, o3)]
    frame = pd.DataFrame({
        'x1': x1.astype(np.float64),
        'x2': x2.astype(np.float64),
        'operation_x1': o1.astype(str),
        'operation_x2': o2.astype(str),
        'operation_between': o3.astype(str),
        'latex_expression': latex,
    })
    logger.info(f"Generated {n} MathExpr rows with seed {seed}")
    return Table(MATHEXPR_SCHEMA, frame)


# ProfileBio

SEXES = ('male', 'female')
BIRTH_STATE_PRIOR = {
    'California': 0.15, 'New York': 0.12, 'Texas': 0.12, 'Florida': 0.10, 'Illinois': 0.08,
    'Washington': 0.08, 'Massachusetts': 0.07, 'Colorado': 0.07, 'Georgia': 0.11, 'Arizona': 0.10,
}
COLLEGE_PRIOR = {
    'Stanford University': 0.05,
    'Harvard University': 0.05,
    'University of California, Berkeley': 0.05,
    'University of Michigan': 0.07,
    'Arizona State University': 0.20,
    'University of Central Florida': 0.15,
    'Santa Monica College': 0.15,
    'Houston Community College': 0.15,
    'Ohio State University': 0.13,
}
ELITE_COLLEGES = frozenset({
    'Stanford University', 'Harvard University', 'University of California, Berkeley',
})
DEGREES = ('associate', 'bachelor', 'master', 'doctoral')
ELITE_DEGREE_PRIOR = {'associate': 0.01, 'bachelor': 0.29, 'master': 0.4, 'doctoral': 0.3}
DEFAULT_DEGREE_PRIOR = {'associate': 0.3, 'bachelor': 0.5, 'master': 0.15, 'doctoral': 0.05}
OCCUPATIONS = (
    'software developer',
    'research specialist',
    'healthcare practitioner',
    'business operations analyst',
    'education professional',
    'creative content professional',
    'technical services specialist',
    'construction professional',
    'customer services professional',
    'public services coordinator',
)
# weight overrides on top of a base weight of 1 per occupation
OCCUPATION_OVERRIDES = {
    'doctoral': {'research specialist': 6, 'education professional': 4},
    'associate': {'customer services professional': 5, 'construction professional': 5},
}
HIGH_PAY_OCCUPATIONS = frozenset({'software developer', 'healthcare practitioner'})

AGE_RANGE = (21, 65)
SALARY_RANGE = (75, 200)
SALARY_BASE = 85
SALARY_NOISE_STD = 15.0

# (low, high, descriptor); bounds inclusive, None = unbounded
AGE_BINS = (
    (21, 25, 'in the early stage of adulthood'),
    (26, 30, 'in an early phase of career development'),
    (31, 40, 'in a career-building stage'),
    (41, 50, 'at an established professional stage'),
    (51, 60, 'in an advanced career stage'),
    (61, None, 'at the late career stage'),
)
SALARY_BINS = (
    (None, 110, 'a comfortable, stable income'),
    (111, 150, 'a strong professional income'),
    (151, None, 'a high-level executive income'),
)

BIOGRAPHY_TEMPLATE = (
    "This {sex} individual is {age_desc}. {pronoun} was born in {birth_state} and "
    "completed higher education at {college}, earning a {degree} degree. "
    "{pronoun} works as a {occupation}. {pronoun} earns {salary_desc}."
)

PROFILEBIO_SCHEMA = TableSchema(
    name='profilebio',
    columns=(
        ColumnSpec('age', ColumnKind.NUMERICAL, integer=True),
        ColumnSpec('salary', ColumnKind.NUMERICAL, integer=True),
        ColumnSpec('sex', ColumnKind.CATEGORICAL, categories=SEXES),
        ColumnSpec('birth_state', ColumnKind.CATEGORICAL, categories=tuple(BIRTH_STATE_PRIOR)),
        ColumnSpec('college', ColumnKind.CATEGORICAL, categories=tuple(COLLEGE_PRIOR)),
        ColumnSpec('degree', ColumnKind.CATEGORICAL, categories=DEGREES),
        ColumnSpec('occupation', ColumnKind.CATEGORICAL, categories=OCCUPATIONS),
        ColumnSpec('biography', ColumnKind.TEXT),
    ),
)


def occupation_prior(degree):
    weights = {occupation: 1.0 for occupation in OCCUPATIONS}
    weights.update(OCCUPATION_OVERRIDES.get(degree, {}))
    total = sum(weights.values())
    return {occupation: w / total for occupation, w in weights.items()}


def degree_prior(college):
    return ELITE_DEGREE_PRIOR if college in ELITE_COLLEGES else DEFAULT_DEGREE_PRIOR


def salary_model(age, degree, occupation, rng=None, noise=None):
    """Salary in thousands; pass `noise` to bypass the Gaussian draw."""
    if not AGE_RANGE[0] <= age <= AGE_RANGE[1]:
        raise ValueError(f"age must lie in {AGE_RANGE}, got {age}")
    if noise is None:
        noise = rng.normal(0.0, SALARY_NOISE_STD)
    value = SALARY_BASE
    if degree == 'master':
        value += 30
    elif degree == 'doctoral':
        value += 50
    if occupation in HIGH_PAY_OCCUPATIONS:
        value += 25
    value += 1.2 * (age - 21) + noise
    rounded = math.floor(value + 0.5)
    return int(min(max(rounded, SALARY_RANGE[0]), SALARY_RANGE[1]))


def descriptor_for(value, bins):
    for low, high, descriptor in bins:
        if (low is None or value >= low) and (high is None or value <= high):
            return descriptor
    raise ValueError(f"No descriptor bin covers {value}")


def pronoun_for(sex):
    return 'He' if sex == 'male' else 'She'


def render_biography(record):
    return BIOGRAPHY_TEMPLATE.format(
        sex=record['sex'],
        age_desc=descriptor_for(record['age'], AGE_BINS),
        pronoun=pronoun_for(record['sex']),
        birth_state=record['birth_state'],
        college=record['college'],
        degree=record['degree'],
        occupation=record['occupation'],
        salary_desc=descriptor_for(record['salary'], SALARY_BINS),
    )


def gen_profilebio(n, seed):
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    sex = np.array(SEXES, dtype=object)[rng.integers(0, 2, size=n)]
    birth_state = _choice(rng, BIRTH_STATE_PRIOR, n)
    college = _choice(rng, COLLEGE_PRIOR, n)
    degree = np.array([_choice(rng, degree_prior(c), 1)[0] for c in college], dtype=object)
    occupation = np.array([_choice(rng, occupation_prior(d), 1)[0] for d in degree], dtype=object)
    age = rng.integers(AGE_RANGE[0], AGE_RANGE[1] + 1, size=n)
    salary = np.array([
        salary_model(int(a), d, o, rng) for a, d, o in zip(age, degree, occupation)
    ])
    frame = pd.DataFrame({
        'age': age.astype(np.int64),
        'salary': salary.astype(np.int64),
        'sex': sex.astype(str),
        'birth_state': birth_state.astype(str),
        'college': college.astype(str),
        'degree': degree.astype(str),
        'occupation': occupation.astype(str),
    })
    frame['biography'] = [render_biography(r) for r in frame.to_dict(orient='records')]
    logger.info(f"Generated {n} ProfileBio rows with seed {seed}")
    return Table(PROFILEBIO_SCHEMA, frame)


GENERATORS = {
    'mathexpr': gen_mathexpr,
    'profilebio': gen_profilebio,
}


def generate(dataset, n, seed):
    if dataset not in GENERATORS:
        raise ValueError(f"Unknown dataset '{dataset}', expected one of {sorted(GENERATORS)}")
    return GENERATORS[dataset](n, seed)
