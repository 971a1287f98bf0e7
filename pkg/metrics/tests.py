import math

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from tabular.generators import (
    AGE_BINS, BIRTH_STATE_PRIOR, COLLEGE_PRIOR, MATHEXPR_SCHEMA, OCCUPATIONS,
    PROFILEBIO_SCHEMA, SALARY_BINS, gen_mathexpr, gen_profilebio, render_biography,
    render_latex,
)
from tabular.schema import ColumnKind, ColumnSpec, SchemaError, Table, TableSchema

from .match_rates import (
    accepted_descriptors, bio_match_rate, dataset_match_rates, expr_match_rate,
    expr_match_sensitivity, extract_literals, op_match_rate, parse_latex,
)
from .services import (
    contingency_score, evaluate, kst, pair_trends, pearson_pair, pearson_score,
    quartile_bins, shape, trend, tvd,
)

RANDOM_SCHEMA = TableSchema(
    name='random',
    columns=(
        ColumnSpec('a', ColumnKind.NUMERICAL),
        ColumnSpec('b', ColumnKind.NUMERICAL),
        ColumnSpec('c', ColumnKind.CATEGORICAL, categories=('x', 'y', 'z')),
        ColumnSpec('d', ColumnKind.CATEGORICAL, categories=('p', 'q')),
        ColumnSpec('note', ColumnKind.TEXT),
    ),
)


def random_table(rng, n):
    frame = pd.DataFrame({
        'a': rng.normal(size=n),
        'b': np.round(rng.exponential(size=n), 1),
        'c': rng.choice(['x', 'y', 'z'], size=n),
        'd': rng.choice(['p', 'q'], size=n),
        'note': ['free text'] * n,
    })
    return Table(RANDOM_SCHEMA, frame)


# Brute-force oracles

def brute_kst(r, s):
    r, s = list(map(float, r)), list(map(float, s))
    best = 0.0
    for x in set(r) | set(s):
        fr = sum(v <= x for v in r) / len(r)
        fs = sum(v <= x for v in s) / len(s)
        best = max(best, abs(fr - fs))
    return best


def brute_frequencies(values):
    counts = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return {k: c / len(values) for k, c in counts.items()}


def brute_tvd(r, s):
    fr, fs = brute_frequencies(list(r)), brute_frequencies(list(s))
    return 0.5 * sum(abs(fr.get(k, 0.0) - fs.get(k, 0.0)) for k in set(fr) | set(fs))


def brute_pearson(x, y):
    x, y = list(map(float, x)), list(map(float, y))
    mx, my = sum(x) / len(x), sum(y) / len(y)
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / math.sqrt(vx * vy)


def brute_contingency(ra, rb, sa, sb):
    return brute_tvd(list(zip(ra, rb)), list(zip(sa, sb)))


def brute_quantile(values, q):
    ordered = sorted(map(float, values))
    position = q * (len(ordered) - 1)
    low = math.floor(position)
    high = min(low + 1, len(ordered) - 1)
    return ordered[low] + (ordered[high] - ordered[low]) * (position - low)


def brute_bins(real_values, values):
    edges = sorted({brute_quantile(real_values, q) for q in (0.25, 0.5, 0.75)})
    return [sum(e < float(v) for e in edges) for v in values]


def brute_shape(real, synth):
    errors = [brute_kst(real.column(n), synth.column(n)) for n in ('a', 'b')]
    errors += [brute_tvd(real.column(n), synth.column(n)) for n in ('c', 'd')]
    return sum(errors) / len(errors)


def brute_trend(real, synth):
    terms = [0.5 * abs(
        brute_pearson(real.column('a'), real.column('b'))
        - brute_pearson(synth.column('a'), synth.column('b'))
    )]
    for num in ('a', 'b'):
        for cat in ('c', 'd'):
            terms.append(brute_contingency(
                brute_bins(real.column(num), real.column(num)), list(real.column(cat)),
                brute_bins(real.column(num), synth.column(num)), list(synth.column(cat)),
            ))
    terms.append(brute_contingency(real.column('c'), real.column('d'), synth.column('c'), synth.column('d')))
    return sum(terms) / len(terms)


class MetricExamplesTestCase(SimpleTestCase):
    def test_kst_shifted_support(self):
        """Test kst on half-overlapping supports is 0.5"""
        self.assertAlmostEqual(kst([1, 2], [2, 3]), 0.5, places=12)

    def test_kst_identical(self):
        """Test kst of a column with itself is 0"""
        self.assertEqual(kst([1.0, 2.5, 4.0], [1.0, 2.5, 4.0]), 0.0)

    def test_tvd_example(self):
        """Test tvd of {a:.5,b:.5} against {a:1} is 0.5"""
        self.assertAlmostEqual(tvd(['a', 'b'], ['a', 'a']), 0.5, places=12)

    def test_tvd_disjoint(self):
        """Test tvd of disjoint categories is 1"""
        self.assertAlmostEqual(tvd(['a'], ['b']), 1.0, places=12)

    def test_empty_column_raises(self):
        """Test metrics reject empty columns"""
        with self.assertRaises(ValueError):
            kst([], [1.0])
        with self.assertRaises(ValueError):
            tvd(['a'], [])

    def test_opposite_correlations(self):
        """Test perfectly opposite correlations give a pair error of 1"""
        x = [1.0, 2.0, 3.0, 4.0]
        self.assertAlmostEqual(pearson_pair(x, x, x, x[::-1]), 1.0, places=12)

    def test_constant_column_skipped(self):
        """Test a constant column skips the Pearson pair"""
        self.assertIsNone(pearson_pair([1, 1, 1], [1, 2, 3], [1, 2, 3], [1, 2, 3]))

    def test_pearson_score_all_skipped(self):
        """Test pearson_score is None when every pair is skipped"""
        frame = pd.DataFrame({'a': [1.0, 1.0, 1.0], 'b': [0.0, 1.0, 2.0]})
        schema = TableSchema('const', (ColumnSpec('a', ColumnKind.NUMERICAL), ColumnSpec('b', ColumnKind.NUMERICAL)))
        table = Table(schema, frame)
        self.assertIsNone(pearson_score(table, table, ['a', 'b']))

    def test_contingency_example(self):
        """Test the two-by-two contingency example scores 3/4"""
        score = contingency_score(['a', 'a', 'b', 'b'], ['x', 'y', 'x', 'y'], ['a', 'a', 'a', 'a'], ['x', 'x', 'x', 'x'])
        self.assertAlmostEqual(score, 0.75, places=12)

    def test_quartile_bins(self):
        """Test values are binned against the real quartile edges"""
        real = [1.0, 2.0, 3.0, 4.0, 5.0]
        np.testing.assert_array_equal(quartile_bins(real, [0.0, 2.0, 2.5, 3.5, 9.0]), [0, 0, 1, 2, 3])


class MetricOracleTestCase(SimpleTestCase):
    def test_random_tables_match_brute_force(self):
        """Test every metric matches an independent implementation on 100 random tables"""
        rng = np.random.default_rng(2024)
        for _ in range(100):
            real = random_table(rng, int(rng.integers(5, 51)))
            synth = random_table(rng, int(rng.integers(5, 51)))
            self.assertAlmostEqual(kst(real.column('a'), synth.column('a')), brute_kst(real.column('a'), synth.column('a')), delta=1e-12)
            self.assertAlmostEqual(tvd(real.column('c'), synth.column('c')), brute_tvd(real.column('c'), synth.column('c')), delta=1e-12)
            self.assertAlmostEqual(
                contingency_score(real.column('c'), real.column('d'), synth.column('c'), synth.column('d')),
                brute_contingency(real.column('c'), real.column('d'), synth.column('c'), synth.column('d')),
                delta=1e-12,
            )
            expected_pair = 0.5 * abs(brute_pearson(real.column('a'), real.column('b')) - brute_pearson(synth.column('a'), synth.column('b')))
            self.assertAlmostEqual(pearson_score(real, synth, ['a', 'b']), expected_pair, delta=1e-12)
            self.assertAlmostEqual(shape(real, synth), brute_shape(real, synth), delta=1e-12)
            self.assertAlmostEqual(trend(real, synth), brute_trend(real, synth), delta=1e-12)

    def test_self_evaluation_is_zero(self):
        """Test Shape and Trend of a table against itself are exactly zero"""
        rng = np.random.default_rng(5)
        table = random_table(rng, 40)
        report = evaluate(table, table)
        self.assertEqual(report.shape, 0.0)
        self.assertEqual(report.trend, 0.0)

    def test_text_columns_excluded(self):
        """Test free-text columns enter neither Shape nor Trend"""
        rng = np.random.default_rng(6)
        real, synth = random_table(rng, 20), random_table(rng, 20)
        self.assertNotIn('note', evaluate(real, synth).column_shapes)
        self.assertFalse(any('note' in pair for pair in pair_trends(real, synth)))

    def test_schema_mismatch(self):
        """Test evaluating tables of different schemas raises"""
        with self.assertRaises(SchemaError):
            evaluate(gen_mathexpr(10, 0), gen_profilebio(10, 0))

    def test_declared_schema_mismatch(self):
        """Test Shape and Trend reject tables that differ from the declared schema"""
        table = gen_mathexpr(10, 0)
        with self.assertRaises(SchemaError):
            shape(table, table, RANDOM_SCHEMA)
        with self.assertRaises(SchemaError):
            trend(table, table, RANDOM_SCHEMA)
        self.assertEqual(shape(table, table, MATHEXPR_SCHEMA), 0.0)


class ParseLatexTestCase(SimpleTestCase):
    def test_parses_every_operator(self):
        """Test every rendered operator combination parses back"""
        for o1 in ('none', 'log', 'exp', 'sqrt', 'sin', 'cos', 'tan', 'square', 'cube'):
            for o3 in ('add', 'sub', 'mul', 'div'):
                latex = render_latex(2.75, 6.4, o1, 'cube', o3)
                self.assertEqual(parse_latex(latex), (o1, 2.75, 'cube', 6.4, o3), latex)

    def test_exponent_form(self):
        """Test e^{x} is read as exp"""
        self.assertEqual(parse_latex('e^{1.50} + 3.00'), ('exp', 1.5, 'none', 3.0, 'add'))

    def test_off_grammar(self):
        """Test malformed expressions do not parse"""
        for latex in ('\\sin(2.75', '2.75 + 3.00 + 1.00', '\\frac{1.00}', 'hello', None):
            self.assertIsNone(parse_latex(latex))

    def test_literals_need_a_parse(self):
        """Test literals come only from expressions the grammar accepts"""
        self.assertEqual(extract_literals(render_latex(2.75, 6.4, 'sin', 'log', 'mul')), (2.75, 6.4))
        self.assertIsNone(extract_literals('\\sin(2.75 \\times 6.40'))
        self.assertIsNone(extract_literals('\\sin(2.75)'))


class MathExprMatchRateTestCase(SimpleTestCase):
    def make_row(self, x1, literal, o1='sin', o2='log', o3='mul'):
        return {
            'x1': x1, 'x2': 6.4,
            'operation_x1': o1, 'operation_x2': o2, 'operation_between': o3,
            'latex_expression': render_latex(literal, 6.4, o1, o2, o3),
        }

    def table(self, rows):
        return Table(MATHEXPR_SCHEMA, pd.DataFrame(rows))

    def test_generated_rows_are_consistent(self):
        """Test freshly generated MathExpr rows score 1.0"""
        table = gen_mathexpr(2000, 3)
        self.assertEqual(op_match_rate(table), 1.0)
        self.assertEqual(expr_match_rate(table), 1.0)

    def test_tolerance_semantics(self):
        """Test a 5.45% literal error matches and a 7.27% one does not"""
        self.assertEqual(expr_match_rate(self.table([self.make_row(2.75, 2.90)])), 1.0)
        self.assertEqual(expr_match_rate(self.table([self.make_row(2.75, 2.95)])), 0.0)

    def test_zero_uses_absolute_tolerance(self):
        """Test a zero structured value is compared absolutely"""
        self.assertEqual(expr_match_rate(self.table([self.make_row(0.0, 0.05)])), 1.0)
        self.assertEqual(expr_match_rate(self.table([self.make_row(0.0, 0.10)])), 0.0)

    def test_one_corrupted_operator(self):
        """Test one mislabeled row in 100 gives Op-MR 0.99"""
        frame = gen_mathexpr(100, 4).frame
        frame.loc[17, 'operation_between'] = 'div' if frame.loc[17, 'operation_between'] != 'div' else 'add'
        self.assertAlmostEqual(op_match_rate(Table(MATHEXPR_SCHEMA, frame)), 0.99, places=12)

    def test_operator_mismatch_fails_expression(self):
        """Test Exp-MR requires the operators to agree"""
        row = self.make_row(2.75, 2.75)
        row['operation_x1'] = 'cos'
        self.assertEqual(expr_match_rate(self.table([row])), 0.0)

    def test_sensitivity_is_monotone(self):
        """Test Exp-MR does not decrease as delta grows"""
        rows = [self.make_row(2.75, 2.75 * (1 + e)) for e in (0.0, 0.02, 0.04, 0.06, 0.09, 0.2)]
        sweep = list(expr_match_sensitivity(self.table(rows)).values())
        self.assertEqual(sweep, sorted(sweep))

    def test_empty_table_raises(self):
        """Test match rates reject an empty table"""
        with self.assertRaises(ValueError):
            op_match_rate(self.table({name: [] for name in MATHEXPR_SCHEMA.names}))


class BioMatchRateTestCase(SimpleTestCase):
    def record(self, **overrides):
        row = {
            'age': 25, 'salary': 100, 'sex': 'female',
            'birth_state': next(iter(BIRTH_STATE_PRIOR)), 'college': next(iter(COLLEGE_PRIOR)),
            'degree': 'bachelor', 'occupation': OCCUPATIONS[0],
        }
        row.update(overrides)
        return row

    def rate(self, row, biography):
        return bio_match_rate(Table(PROFILEBIO_SCHEMA, pd.DataFrame([dict(row, biography=biography)])))

    def test_generated_rows_are_consistent(self):
        """Test freshly generated ProfileBio rows score 1.0"""
        self.assertEqual(bio_match_rate(gen_profilebio(2000, 5)), 1.0)

    def test_boundary_relaxation(self):
        """Test age 25 may carry the next bin's descriptor but age 24 may not"""
        self.assertEqual(self.rate(self.record(), render_biography(self.record(age=26))), 1.0)
        self.assertEqual(self.rate(self.record(age=24), render_biography(self.record(age=26))), 0.0)

    def test_wrong_occupation(self):
        """Test a biography naming another occupation fails"""
        row = self.record()
        self.assertEqual(self.rate(row, render_biography(self.record(occupation=OCCUPATIONS[1]))), 0.0)

    def test_wrong_pronoun(self):
        """Test the pronoun must agree with sex"""
        row = self.record()
        self.assertEqual(self.rate(row, render_biography(row).replace('She ', 'He ')), 0.0)

    def test_accepted_descriptors(self):
        """Test descriptor slack near age and salary boundaries"""
        self.assertEqual(accepted_descriptors(28, AGE_BINS), {AGE_BINS[1][2]})
        self.assertEqual(accepted_descriptors(61, AGE_BINS), {AGE_BINS[4][2], AGE_BINS[5][2]})
        self.assertEqual(accepted_descriptors(112, SALARY_BINS), {SALARY_BINS[0][2], SALARY_BINS[1][2]})
        self.assertEqual(accepted_descriptors(113, SALARY_BINS), {SALARY_BINS[1][2]})


class FidelityReportTestCase(SimpleTestCase):
    def test_mathexpr_report(self):
        """Test the MathExpr report carries Op-MR, Exp-MR and the delta sweep"""
        real, synth = gen_mathexpr(500, 1), gen_mathexpr(500, 2)
        report = evaluate(real, synth, invalid_records=3)
        self.assertEqual(set(report.match_rates), {'Op-MR', 'Exp-MR'})
        self.assertEqual(len(report.exp_mr_sensitivity), 5)
        data = report.to_dict()
        self.assertEqual(data['invalid_records'], 3)
        self.assertAlmostEqual(data['shape_percent'], round(100 * report.shape, 2))
        self.assertIn('Op-MR', report.render())

    def test_profilebio_report(self):
        """Test the ProfileBio report carries Bio-MR only"""
        report = evaluate(gen_profilebio(300, 1), gen_profilebio(300, 2))
        self.assertEqual(set(report.match_rates), {'Bio-MR'})
        self.assertEqual(report.exp_mr_sensitivity, {})

    def test_unscored_trend_is_not_reported(self):
        """Test the report leaves Trend empty when every pair was skipped"""
        frame = pd.DataFrame({'a': [1.0, 1.0, 1.0], 'b': [0.0, 1.0, 2.0]})
        schema = TableSchema('const', (ColumnSpec('a', ColumnKind.NUMERICAL), ColumnSpec('b', ColumnKind.NUMERICAL)))
        table = Table(schema, frame)
        with self.assertRaises(ValueError):
            trend(table, table)
        with self.assertLogs('metrics.services', level='WARNING'):
            report = evaluate(table, table)
        self.assertIsNone(report.trend)
        self.assertEqual(report.shape, 0.0)
        self.assertIsNone(report.to_dict()['trend_percent'])
        self.assertIn('Trend error  n/a', report.render())

    def test_empty_synthetic_table(self):
        """Test a synthetic table without valid records still yields a report"""
        real = gen_mathexpr(50, 0)
        synth = Table(MATHEXPR_SCHEMA, real.frame.iloc[:0])
        with self.assertLogs('metrics.services', level='WARNING'):
            report = evaluate(real, synth, invalid_records=12)
        self.assertEqual(report.n_synth, 0)
        self.assertEqual(report.invalid_records, 12)
        self.assertIsNone(report.shape)
        self.assertIsNone(report.trend)
        self.assertEqual(report.match_rates, {})
        self.assertEqual(report.to_dict()['invalid_records'], 12)
        self.assertIn('Invalid records  12', report.render())

    def test_generic_dataset_has_no_rates(self):
        """Test tables of other datasets report no match rates"""
        table = random_table(np.random.default_rng(0), 10)
        self.assertEqual(dataset_match_rates(table), ({}, {}))
