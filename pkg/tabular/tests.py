import math
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from .generators import (
    AGE_BINS, BIRTH_STATE_PRIOR, COLLEGE_PRIOR, O1_PRIOR, O2_PRIOR, O3_PRIOR,
    OCCUPATIONS, SALARY_BINS, X1_GRID, descriptor_for, gen_mathexpr,
    gen_profilebio, generate, grid_gaussian_weights, occupation_prior,
    render_biography, render_latex, salary_model,
)
from .schema import MISSING_CATEGORY, ColumnKind, SchemaError, Table, preprocess
from .services import read_table, sidecar_path, split, write_table


def within_standard_errors(test, values, prior, n, k=3.0):
    frequencies = pd.Series(values).value_counts(normalize=True)
    for key, p in prior.items():
        se = math.sqrt(p * (1 - p) / n)
        test.assertLessEqual(abs(frequencies.get(key, 0.0) - p), k * se, key)


class RenderLatexTestCase(SimpleTestCase):
    def test_table_row(self):
        """Test the sin/log/mul example renders exactly"""
        self.assertEqual(
            render_latex(2.75, 6.40, 'sin', 'log', 'mul'),
            '\\sin(2.75) \\times \\log(6.40)',
        )

    def test_identity_operators(self):
        """Test none/none/add renders plain literals"""
        self.assertEqual(render_latex(1.0, 3.0, 'none', 'none', 'add'), '1.00 + 3.00')

    def test_fraction(self):
        """Test square/sqrt/div renders a nested fraction"""
        self.assertEqual(
            render_latex(2.0, 4.0, 'square', 'sqrt', 'div'),
            '\\frac{(2.00)^2}{\\sqrt{4.00}}',
        )

    def test_other_operators(self):
        """Test exp, cube and sub renderings"""
        self.assertEqual(render_latex(0.5, 3.1, 'exp', 'cube', 'sub'), '\\exp(0.50) - (3.10)^3')

    def test_unknown_operator(self):
        """Test unknown operators raise"""
        with self.assertRaises(ValueError):
            render_latex(1.0, 3.0, 'abs', 'none', 'add')
        with self.assertRaises(ValueError):
            render_latex(1.0, 3.0, 'none', 'none', 'pow')


class MathExprGeneratorTestCase(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.table = gen_mathexpr(50000, seed=7)

    def test_grids(self):
        """Test x1 and x2 stay on their 0.1 grids"""
        frame = self.table.frame
        self.assertTrue(frame['x1'].between(0.0, 6.0).all())
        self.assertTrue(frame['x2'].between(3.0, 10.0).all())
        np.testing.assert_allclose(frame['x1'] * 10, np.rint(frame['x1'] * 10), atol=1e-9)
        np.testing.assert_allclose(frame['x2'] * 10, np.rint(frame['x2'] * 10), atol=1e-9)

    def test_priors(self):
        """Test operator frequencies match the priors"""
        frame = self.table.frame
        within_standard_errors(self, frame['operation_x1'], O1_PRIOR, len(frame))
        within_standard_errors(self, frame['operation_x2'], O2_PRIOR, len(frame))
        within_standard_errors(self, frame['operation_between'], O3_PRIOR, len(frame))
        p_add = (frame['operation_between'] == 'add').mean()
        self.assertAlmostEqual(p_add, 0.35, delta=0.01)

    def test_x1_mean(self):
        """Test the x1 mean matches the grid-truncated Gaussian expectation"""
        weights = np.array([math.exp(-0.5 * (x - 3.0) ** 2) for x in X1_GRID])
        expected = float((weights * X1_GRID).sum() / weights.sum())
        self.assertAlmostEqual(self.table.frame['x1'].mean(), expected, delta=0.02)
        self.assertAlmostEqual(expected, 3.0, delta=0.01)

    def test_latex_consistent(self):
        """Test each latex field is the rendering of its row"""
        for row in self.table.frame.head(500).to_dict(orient='records'):
            self.assertEqual(
                row['latex_expression'],
                render_latex(row['x1'], row['x2'], row['operation_x1'],
                             row['operation_x2'], row['operation_between']),
            )

    def test_deterministic(self):
        """Test identical seeds give identical tables"""
        a = gen_mathexpr(200, seed=3).frame
        b = gen_mathexpr(200, seed=3).frame
        pd.testing.assert_frame_equal(a, b)
        self.assertFalse(a.equals(gen_mathexpr(200, seed=4).frame))

    def test_weights_normalized(self):
        """Test grid weights sum to one"""
        self.assertAlmostEqual(grid_gaussian_weights(X1_GRID, 3.0, 1.0).sum(), 1.0)

    def test_bad_count(self):
        """Test n below one raises"""
        with self.assertRaises(ValueError):
            gen_mathexpr(0, seed=0)


class ProfileBioGeneratorTestCase(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.table = gen_profilebio(50000, seed=11)

    def test_bounds(self):
        """Test age and salary stay within their hard bounds"""
        frame = self.table.frame
        self.assertTrue(frame['age'].between(21, 65).all())
        self.assertTrue(frame['salary'].between(75, 200).all())

    def test_priors(self):
        """Test state and college frequencies match the priors"""
        frame = self.table.frame
        within_standard_errors(self, frame['birth_state'], BIRTH_STATE_PRIOR, len(frame))
        within_standard_errors(self, frame['college'], COLLEGE_PRIOR, len(frame))
        p_asu = (frame['college'] == 'Arizona State University').mean()
        self.assertAlmostEqual(p_asu, 0.20, delta=0.01)
        self.assertAlmostEqual((frame['sex'] == 'female').mean(), 0.5, delta=0.01)

    def test_doctoral_occupation_weights(self):
        """Test doctoral reweighting gives research specialist 6 of 18"""
        prior = occupation_prior('doctoral')
        self.assertAlmostEqual(prior['research specialist'], 6 / 18)
        self.assertAlmostEqual(prior['education professional'], 4 / 18)
        self.assertAlmostEqual(sum(prior.values()), 1.0)
        self.assertEqual(set(prior), set(OCCUPATIONS))
        self.assertAlmostEqual(occupation_prior('bachelor')['software developer'], 0.1)

    def test_biography_consistent(self):
        """Test each biography is the template rendering of its row"""
        for row in self.table.frame.head(500).to_dict(orient='records'):
            self.assertEqual(row['biography'], render_biography(row))

    def test_deterministic(self):
        """Test identical seeds give identical tables"""
        pd.testing.assert_frame_equal(gen_profilebio(100, 5).frame, gen_profilebio(100, 5).frame)


class SalaryModelTestCase(SimpleTestCase):
    def test_master_developer(self):
        """Test the noise-free master software developer case"""
        self.assertEqual(salary_model(38, 'master', 'software developer', noise=0.0), 160)

    def test_base_case(self):
        """Test the noise-free base salary"""
        self.assertEqual(salary_model(21, 'associate', 'customer services professional', noise=0.0), 85)

    def test_clamped(self):
        """Test large noise clamps to the salary bounds"""
        self.assertEqual(salary_model(40, 'bachelor', 'construction professional', noise=1000.0), 200)
        self.assertEqual(salary_model(40, 'bachelor', 'construction professional', noise=-1000.0), 75)

    def test_age_precondition(self):
        """Test ages outside the range raise"""
        with self.assertRaises(ValueError):
            salary_model(20, 'bachelor', 'software developer', noise=0.0)


class BiographyTestCase(SimpleTestCase):
    def test_descriptors(self):
        """Test age and salary descriptors at and around the bin edges"""
        self.assertEqual(descriptor_for(23, AGE_BINS), 'in the early stage of adulthood')
        self.assertEqual(descriptor_for(60, AGE_BINS), 'in an advanced career stage')
        self.assertEqual(descriptor_for(61, AGE_BINS), 'at the late career stage')
        self.assertEqual(descriptor_for(160, SALARY_BINS), 'a high-level executive income')
        self.assertEqual(descriptor_for(110, SALARY_BINS), 'a comfortable, stable income')
        self.assertEqual(descriptor_for(111, SALARY_BINS), 'a strong professional income')

    def test_full_record(self):
        """Test a full record renders the template verbatim"""
        record = {
            'age': 38, 'salary': 135, 'sex': 'female', 'birth_state': 'Texas',
            'college': 'University of Michigan', 'degree': 'master',
            'occupation': 'software developer',
        }
        self.assertEqual(
            render_biography(record),
            "This female individual is in a career-building stage. She was born in Texas "
            "and completed higher education at University of Michigan, earning a master "
            "degree. She works as a software developer. She earns a strong professional income.",
        )


class TableServicesTestCase(SimpleTestCase):
    def test_split_sizes(self):
        """Test a 9:1 split of 5000 rows"""
        table = gen_mathexpr(5000, seed=0)
        train, val = split(table, 0.9, seed=1)
        self.assertEqual((len(train), len(val)), (4500, 500))
        merged = pd.concat([train.frame, val.frame]).sort_values(list(table.schema.names))
        expected = table.frame.sort_values(list(table.schema.names))
        pd.testing.assert_frame_equal(merged.reset_index(drop=True), expected.reset_index(drop=True))

    def test_split_full_fraction(self):
        """Test fraction 1.0 leaves validation empty"""
        train, val = split(gen_mathexpr(50, seed=0), 1.0, seed=0)
        self.assertEqual((len(train), len(val)), (50, 0))

    def test_split_deterministic(self):
        """Test the same seed gives the same partition"""
        table = gen_profilebio(300, seed=2)
        a, _ = split(table, 0.9, seed=9)
        b, _ = split(table, 0.9, seed=9)
        pd.testing.assert_frame_equal(a.frame, b.frame)

    def test_csv_round_trip(self):
        """Test writing and reading a table preserves every field"""
        for dataset in ('mathexpr', 'profilebio'):
            table = generate(dataset, 100, seed=4)
            with tempfile.TemporaryDirectory() as tmp:
                path = write_table(table, Path(tmp) / f"{dataset}.csv")
                self.assertTrue(sidecar_path(path, 'schema').exists())
                loaded = read_table(path)
            self.assertEqual(loaded.schema, table.schema)
            for spec in table.schema.columns:
                if spec.kind == ColumnKind.NUMERICAL:
                    np.testing.assert_allclose(loaded.column(spec.name), table.column(spec.name))
                else:
                    self.assertEqual(list(loaded.column(spec.name)), list(table.column(spec.name)))

    def test_read_without_schema(self):
        """Test reading a csv with no sidecar raises"""
        with tempfile.TemporaryDirectory() as tmp:
            path = write_table(gen_mathexpr(5, seed=0), Path(tmp) / 'x.csv', write_schema=False)
            with self.assertRaises(SchemaError):
                read_table(path)


class PreprocessTestCase(SimpleTestCase):
    def test_imputation(self):
        """Test mean imputation and the explicit missing category"""
        table = gen_mathexpr(4, seed=0)
        frame = table.frame.copy()
        frame['x1'] = [1.0, np.nan, 3.0, 5.0]
        frame.loc[1, 'operation_x1'] = ''
        out = preprocess(Table(table.schema, frame))
        self.assertEqual(out.column('x1')[1], 3.0)
        self.assertEqual(out.column('operation_x1')[1], MISSING_CATEGORY)
        self.assertIn(MISSING_CATEGORY, out.schema.column('operation_x1').categories)

    def test_all_missing(self):
        """Test an all-missing numerical column raises"""
        table = gen_mathexpr(3, seed=0)
        frame = table.frame.copy()
        frame['x2'] = np.nan
        with self.assertRaises(SchemaError):
            preprocess(Table(table.schema, frame))
