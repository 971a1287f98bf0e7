import math

import numpy as np
import torch
from django.test import SimpleTestCase

from schedules.services import ChurnConfig, PowerMeanSchedule

from .sampler import (
    SampleResult, SamplerConfig, euler_update, finalize, gumbel_sample,
    reveal_schedule, sample, unmask_step,
)
from .tests import toy_setup
from .utils import make_generator


class OracleDenoiser:
    """Always predicts one fixed clean record."""

    def __init__(self, clean_tokens, clean_numbers, vocab_size):
        self.clean_tokens = clean_tokens
        self.clean_numbers = torch.as_tensor(clean_numbers, dtype=torch.float64)
        self.vocab_size = vocab_size
        self.calls = 0

    def denoise(self, tokens, x_noisy, sigma):
        self.calls += 1
        batch = tokens.shape[0]
        logits = torch.zeros(batch, tokens.shape[1], self.vocab_size, dtype=torch.float64)
        logits.scatter_(2, self.clean_tokens.expand(batch, -1)[..., None], 1e4)
        return logits, self.clean_numbers.expand(batch, -1).clone()


class GumbelSampleTestCase(SimpleTestCase):
    def test_dominant_logit(self):
        """Test a +1e9 logit is always chosen"""
        logits = torch.zeros(1000, 5, dtype=torch.float64)
        logits[:, 3] = 1e9
        self.assertTrue((gumbel_sample(logits, 1.0, make_generator(0)) == 3).all())

    def test_uniform_frequencies(self):
        """Test uniform logits over 4 tokens give uniform frequencies"""
        draws = gumbel_sample(torch.zeros(100_000, 4), 1.0, make_generator(1))
        frequencies = np.bincount(draws.numpy(), minlength=4) / 100_000
        np.testing.assert_allclose(frequencies, 0.25, atol=0.01)

    def test_softmax_frequencies(self):
        """Test logits (ln 3, 0) give frequencies (0.75, 0.25)"""
        logits = torch.tensor([[math.log(3.0), 0.0]]).expand(100_000, 2)
        draws = gumbel_sample(logits, 1.0, make_generator(2))
        self.assertAlmostEqual(float((draws == 0).double().mean()), 0.75, delta=0.01)

    def test_temperature(self):
        """Test temperature rescales the logits before sampling"""
        logits = torch.tensor([[math.log(3.0), 0.0]]).expand(100_000, 2)
        draws = gumbel_sample(logits, 2.0, make_generator(3))
        expected = math.sqrt(3.0) / (math.sqrt(3.0) + 1.0)
        self.assertAlmostEqual(float((draws == 0).double().mean()), expected, delta=0.01)
        with self.assertRaises(ValueError):
            gumbel_sample(logits, 0.0)

    def test_all_negative_infinity(self):
        """Test all -inf logits raise"""
        with self.assertRaises(ValueError):
            gumbel_sample(torch.full((2, 3), float('-inf')))


class UnmaskStepTestCase(SimpleTestCase):
    def setUp(self):
        self.tokens = torch.tensor([2, 1, 1, 1, 1])
        self.candidates = torch.tensor([0, 10, 11, 12, 13])
        self.confidences = torch.tensor([0.0, 0.2, 0.9, 0.5, 0.1])
        self.masked = torch.tensor([False, True, True, True, True])

    def test_reveal_schedule(self):
        """Test reveal counts are uniform with the remainder first"""
        self.assertEqual(reveal_schedule(10, 4), [3, 3, 2, 2])
        self.assertEqual(reveal_schedule(3, 5), [1, 1, 1, 0, 0])
        self.assertEqual(sum(reveal_schedule(57, 50)), 57)

    def test_reveal_all(self):
        """Test revealing every masked position unmasks the record"""
        tokens, masked = unmask_step(self.tokens, self.candidates, self.confidences, self.masked, 4, 'confidence')
        self.assertFalse(masked.any())
        self.assertEqual(tokens.tolist(), [2, 10, 11, 12, 13])

    def test_reveal_none(self):
        """Test revealing zero positions changes nothing"""
        tokens, masked = unmask_step(self.tokens, self.candidates, self.confidences, self.masked, 0, 'random')
        self.assertTrue(torch.equal(tokens, self.tokens))
        self.assertTrue(torch.equal(masked, self.masked))

    def test_confidence_policy(self):
        """Test the most confident masked positions are revealed"""
        tokens, masked = unmask_step(self.tokens, self.candidates, self.confidences, self.masked, 2, 'confidence')
        self.assertEqual(tokens.tolist(), [2, 1, 11, 12, 1])
        self.assertEqual(masked.tolist(), [False, True, False, False, True])

    def test_random_policy(self):
        """Test the random policy reveals a seeded subset of masked positions"""
        a, mask_a = unmask_step(self.tokens, self.candidates, self.confidences, self.masked, 2, 'random', make_generator(4))
        b, _ = unmask_step(self.tokens, self.candidates, self.confidences, self.masked, 2, 'random', make_generator(4))
        self.assertTrue(torch.equal(a, b))
        self.assertEqual(int(mask_a.sum()), 2)
        self.assertEqual(int(a[0]), 2)

    def test_too_many(self):
        """Test revealing more than the masked count raises"""
        with self.assertRaises(ValueError):
            unmask_step(self.tokens, self.candidates, self.confidences, self.masked, 5, 'confidence')


class EulerUpdateTestCase(SimpleTestCase):
    def test_zero_drift(self):
        """Test a prediction equal to the input does not move it"""
        x = torch.tensor([0.3, -2.0], dtype=torch.float64)
        self.assertTrue(torch.equal(euler_update(x, x, 5.0, 2.0), x))

    def test_final_step(self):
        """Test sigma_next = 0 lands exactly on the prediction"""
        x_hat = torch.tensor([1.7, -0.4], dtype=torch.float64)
        x_tilde = torch.tensor([0.25, 0.5], dtype=torch.float64)
        torch.testing.assert_close(euler_update(x_hat, x_tilde, 0.5, 0.0), x_tilde, rtol=0, atol=1e-15)

    def test_hand_example(self):
        """Test x=2, prediction 0, sigma 2 -> 1 gives 1"""
        out = euler_update(torch.tensor([2.0], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64), 2.0, 1.0)
        self.assertEqual(float(out[0]), 1.0)

    def test_zero_sigma_hat(self):
        """Test sigma_hat = 0 returns the prediction"""
        out = euler_update(torch.tensor([2.0]), torch.tensor([0.7]), torch.tensor([0.0]), 0.0)
        self.assertAlmostEqual(float(out[0]), 0.7, places=6)


class SamplerConfigTestCase(SimpleTestCase):
    def test_validation(self):
        """Test invalid sampler settings are rejected"""
        for kwargs in ({'steps': 0}, {'temperature': 0.0}, {'policy': 'greedy'}, {'batch_size': 0}):
            with self.assertRaises(ValueError):
                SamplerConfig(**kwargs)


class OracleSamplerTestCase(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.table, cls.vocabulary, cls.layout, cls.tokens, cls.numbers, cls.denoiser = toy_setup(n=64)
        cls.schedule = PowerMeanSchedule.uniform(2)

    def _oracle(self, row=0):
        return OracleDenoiser(self.tokens[row:row + 1], self.numbers[row:row + 1], len(self.vocabulary))

    def _sample(self, oracle, **config):
        options = dict(steps=50, seed=0, batch_size=64)
        options.update(config)
        return sample(oracle, self.layout, self.vocabulary, SamplerConfig(**options), 64, schedule=self.schedule)

    def test_recovers_oracle_record(self):
        """Test every sampled record reproduces the oracle record"""
        for policy in ('confidence', 'random'):
            result = self._sample(self._oracle(), policy=policy)
            self.assertTrue(torch.equal(result.tokens, self.tokens[0:1].expand(64, -1)))
            np.testing.assert_allclose(result.numbers.numpy(), np.tile(self.numbers[0], (64, 1)), atol=1e-3)

    def test_single_step(self):
        """Test T=1 recovers the oracle prediction in one step"""
        oracle = self._oracle(row=5)
        result = self._sample(oracle, steps=1)
        self.assertEqual(oracle.calls, 1)
        self.assertTrue(torch.equal(result.tokens, self.tokens[5:6].expand(64, -1)))
        np.testing.assert_allclose(result.numbers.numpy(), np.tile(self.numbers[5], (64, 1)), atol=1e-12)

    def test_churn(self):
        """Test churn still converges to the oracle record"""
        result = self._sample(self._oracle(), churn=ChurnConfig(s_churn=40.0))
        np.testing.assert_allclose(result.numbers.numpy(), np.tile(self.numbers[0], (64, 1)), atol=1e-3)

    def test_monotone_unmasking(self):
        """Test the masked count never increases and ends at zero"""
        result = self._sample(self._oracle(), steps=7, policy='random')
        counts = result.masked_counts
        self.assertEqual(counts[0], 64 * self.layout.generation_length)
        self.assertTrue(all(a >= b for a, b in zip(counts, counts[1:])))
        self.assertEqual(counts[-1], 0)

    def test_prompt_preserved(self):
        """Test prompt tokens are unchanged in every sampled record"""
        result = sample(self.denoiser, self.layout, self.vocabulary, SamplerConfig(steps=4, batch_size=16), 16)
        prompt = torch.tensor(self.layout.prompt)
        self.assertTrue((result.tokens[:, :self.layout.prompt_length] == prompt).all())
        num_slots = result.tokens[:, self.layout.numeric_positions]
        self.assertTrue((num_slots == self.vocabulary.num_id).all())

    def test_deterministic(self):
        """Test a fixed seed gives bit-identical output"""
        config = SamplerConfig(steps=5, seed=9, batch_size=8, policy='random')
        a = sample(self.denoiser, self.layout, self.vocabulary, config, 16)
        b = sample(self.denoiser, self.layout, self.vocabulary, config, 16)
        self.assertTrue(torch.equal(a.tokens, b.tokens))
        self.assertTrue(torch.equal(a.numbers, b.numbers))

    def test_sharded_matches_single_run(self):
        """Test sampling a shard reproduces the same records of a full run"""
        config = SamplerConfig(steps=5, seed=9, batch_size=8)
        full = sample(self.denoiser, self.layout, self.vocabulary, config, 16)
        shard = sample(self.denoiser, self.layout, self.vocabulary, config, 8, start=8)
        self.assertTrue(torch.equal(full.tokens[8:], shard.tokens))
        self.assertTrue(torch.equal(full.numbers[8:], shard.numbers))

    def test_finalize(self):
        """Test finalizing an oracle sample returns the original record"""
        from numcodec.services import fit_table_normalizers
        normalizers = fit_table_normalizers(self.table)
        result = self._sample(self._oracle(row=3), steps=10)
        table, invalid = finalize(result, self.layout, self.vocabulary, self.table.schema, normalizers)
        self.assertEqual(invalid, 0)
        self.assertEqual(len(table), 64)
        expected = self.table.records()[3]
        for key, value in table.records()[17].items():
            if isinstance(value, float):
                self.assertAlmostEqual(value, expected[key], places=9)
            else:
                self.assertEqual(value, expected[key])

    def test_finalize_counts_invalid(self):
        """Test records with stray masks are dropped and counted"""
        from numcodec.services import fit_table_normalizers
        normalizers = fit_table_normalizers(self.table)
        tokens = self.tokens[:4].clone()
        tokens[1, self.layout.generation_positions[0]] = self.vocabulary.mask_id
        result = SampleResult(tokens=tokens, numbers=torch.as_tensor(self.numbers[:4]), masked_counts=[])
        table, invalid = finalize(result, self.layout, self.vocabulary, self.table.schema, normalizers)
        self.assertEqual(invalid, 1)
        self.assertEqual(len(table), 3)
