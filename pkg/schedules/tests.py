import math

import numpy as np
import torch
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from .services import (
    ChurnConfig, MaskSchedule, PowerMeanNoise, PowerMeanSchedule,
    alpha_bar, discretize, sigma_at,
)


class PowerMeanScheduleTestCase(SimpleTestCase):
    def test_endpoints(self):
        """Test sigma_at hits sigma_min and sigma_max exactly at the endpoints"""
        rng = np.random.default_rng(0)
        for rho in rng.uniform(0.2, 20.0, size=100):
            schedule = PowerMeanSchedule(rho=(float(rho),))
            self.assertEqual(sigma_at(0.0, 0, schedule), 0.002)
            self.assertEqual(sigma_at(1.0, 0, schedule), 80.0)

    def test_linear_midpoint(self):
        """Test rho=1 reduces to linear interpolation"""
        schedule = PowerMeanSchedule(rho=(1.0,))
        self.assertAlmostEqual(sigma_at(0.5, 0, schedule), 40.001, places=12)

    def test_monotone_on_grid(self):
        """Test sigma is strictly increasing over 1000 grid points"""
        grid = np.linspace(0.0, 1.0, 1000)
        for rho in (0.2, 1.0, 7.0, 20.0):
            schedule = PowerMeanSchedule(rho=(rho,))
            values = [schedule.sigma_at(float(t), 0) for t in grid]
            self.assertTrue(all(a < b for a, b in zip(values, values[1:])))

    @settings(max_examples=200, deadline=None)
    @given(
        rho=st.floats(min_value=0.2, max_value=20.0),
        t1=st.floats(min_value=0.0, max_value=1.0),
        t2=st.floats(min_value=0.0, max_value=1.0),
    )
    def test_monotone_property(self, rho, t1, t2):
        """Test t1 < t2 implies sigma(t1) < sigma(t2)"""
        if t2 - t1 < 1e-6:
            return
        schedule = PowerMeanSchedule(rho=(rho,))
        self.assertLess(schedule.sigma_at(t1, 0), schedule.sigma_at(t2, 0))

    def test_preconditions(self):
        """Test invalid arguments are rejected"""
        schedule = PowerMeanSchedule(rho=(7.0, 3.0))
        with self.assertRaises(ValueError):
            schedule.sigma_at(1.5, 0)
        with self.assertRaises(ValueError):
            schedule.sigma_at(0.5, 2)
        with self.assertRaises(ValueError):
            PowerMeanSchedule(rho=(0.0,))
        with self.assertRaises(ValueError):
            PowerMeanSchedule(sigma_min=1.0, sigma_max=0.5)

    def test_batched_sigmas_match_scalar(self):
        """Test the tensor path agrees with sigma_at per feature"""
        schedule = PowerMeanSchedule(rho=(7.0, 2.0))
        t = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
        sigmas = schedule.sigmas(t)
        for i, ti in enumerate(t.tolist()):
            for j in range(2):
                self.assertAlmostEqual(sigmas[i, j].item(), schedule.sigma_at(ti, j), places=9)


class MaskScheduleTestCase(SimpleTestCase):
    def test_linear_values(self):
        """Test the default survival function is 1 - t"""
        self.assertEqual(alpha_bar(0.0), 1.0)
        self.assertEqual(alpha_bar(1.0), 0.0)
        self.assertEqual(alpha_bar(0.25), 0.75)

    def test_every_kind_is_bounded_and_non_increasing(self):
        """Test alpha_bar stays in [0,1], starts at 1, ends at 0"""
        grid = np.linspace(0.0, 1.0, 501)
        for kind in ('linear', 'cosine'):
            schedule = MaskSchedule(kind)
            values = [schedule.alpha_bar(float(t)) for t in grid]
            self.assertEqual(values[0], 1.0)
            self.assertEqual(values[-1], 0.0)
            self.assertTrue(all(0.0 <= v <= 1.0 for v in values))
            self.assertTrue(all(a >= b for a, b in zip(values, values[1:])))

    def test_unknown_kind(self):
        """Test unknown schedules are rejected"""
        with self.assertRaises(ValueError):
            MaskSchedule('quadratic')


class DiscretizeTestCase(SimpleTestCase):
    def test_single_step(self):
        """Test T=1 yields [0, sigma_max] with no churn"""
        grid = discretize(PowerMeanSchedule(), 1)
        self.assertEqual(grid.sigma_levels[:, 0].tolist(), [0.0, 80.0])
        np.testing.assert_array_equal(grid.churned_levels, grid.sigma_levels)

    def test_midpoint_level(self):
        """Test sigma_5 of a 10-step grid equals sigma_at(0.5)"""
        schedule = PowerMeanSchedule(rho=(7.0,))
        grid = discretize(schedule, 10)
        expected = (0.002 ** (1 / 7) + 0.5 * (80.0 ** (1 / 7) - 0.002 ** (1 / 7))) ** 7
        self.assertAlmostEqual(grid.sigma(5)[0], expected, places=12)

    def test_churn_disabled(self):
        """Test zero churn keeps sigma_hat equal to sigma"""
        grid = discretize(PowerMeanSchedule(rho=(7.0, 3.0)), 25, ChurnConfig(s_churn=0.0))
        np.testing.assert_array_equal(grid.churned_levels, grid.sigma_levels)

    def test_churned_levels_dominate_and_levels_decrease(self):
        """Test sigma_hat >= sigma and strict decrease in reverse time"""
        churn = ChurnConfig(s_churn=40.0)
        grid = discretize(PowerMeanSchedule(rho=(7.0, 0.5)), 50, churn)
        self.assertTrue(np.all(grid.churned_levels >= grid.sigma_levels))
        self.assertTrue(np.all(np.diff(grid.sigma_levels, axis=0) > 0))
        gamma = min(40.0 / 50, math.sqrt(2) - 1)
        np.testing.assert_allclose(grid.churned_levels[1:], grid.sigma_levels[1:] * (1 + gamma))

    def test_zero_steps_rejected(self):
        """Test T=0 is an invalid configuration"""
        with self.assertRaises(ValueError):
            discretize(PowerMeanSchedule(), 0)


class PowerMeanNoiseTestCase(SimpleTestCase):
    def test_fixed_mode_has_no_parameters(self):
        """Test fixed rho is a buffer"""
        noise = PowerMeanNoise(3)
        self.assertEqual(list(noise.parameters()), [])
        np.testing.assert_allclose(noise.snapshot().rho, (7.0, 7.0, 7.0), rtol=1e-6)

    def test_learnable_mode_receives_gradients(self):
        """Test learnable rho gets a gradient through sigma"""
        noise = PowerMeanNoise(2, learnable=True)
        sigma = noise(torch.tensor([0.3, 0.7]))
        sigma.sum().backward()
        self.assertIsNotNone(noise.log_rho.grad)
        self.assertTrue(torch.all(noise.log_rho.grad != 0))
