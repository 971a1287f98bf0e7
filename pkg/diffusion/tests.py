import copy
import json
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase

from mdlm.layout import ColumnSpan, TokenLayout, build_layout, serialize_table
from mdlm.networks import BackboneConfig
from mdlm.vocabulary import build_vocabulary, table_corpus
from numcodec.networks import FloatCodec
from numcodec.services import fit_table_normalizers
from schedules.services import MaskSchedule, PowerMeanNoise
from tabular.generators import gen_mathexpr

from .networks import InputScaling, build_denoiser
from .services import (
    LossReport, NoisyBatch, NonFiniteLossError, compute_loss, corrupt,
    forward_mask_text, forward_noise_numeric, lambda_weight, numeric_loss, text_loss,
)
from .training import Trainer, TrainingConfig, warmup_linear_decay
from .utils import derive_seed, make_generator

MASK_ID = 1


def toy_setup(n=64, dtype=torch.float64, seed=0, dropout=0.0, learnable=False, **backbone):
    table = gen_mathexpr(n, seed=seed)
    vocabulary = build_vocabulary(table_corpus(table))
    layout = build_layout(table, vocabulary)
    normalizers = fit_table_normalizers(table)
    tokens, numbers = serialize_table(table, layout, vocabulary, normalizers)
    options = dict(layers=2, model_dim=32, heads=2, ff_dim=64, max_len=layout.length, dropout=0.0)
    options.update(backbone)
    torch.manual_seed(seed)
    denoiser = build_denoiser(
        FloatCodec(8), layout, len(vocabulary), BackboneConfig(**options),
        PowerMeanNoise(len(layout.numeric_names), learnable=learnable), dropout=dropout, dtype=dtype,
    )
    return table, vocabulary, layout, tokens, numbers, denoiser


def flat_layout(width, prompt=(2, 4)):
    return TokenLayout(
        prompt=prompt,
        spans=(ColumnSpan('text', 'text', len(prompt), width),),
        numeric_names=(),
    )


class UtilsTestCase(SimpleTestCase):
    def test_derive_seed(self):
        """Test derived seeds are stable and distinct"""
        self.assertEqual(derive_seed(1, 'step', 3), derive_seed(1, 'step', 3))
        self.assertNotEqual(derive_seed(1, 'step', 3), derive_seed(1, 'step', 4))
        self.assertLess(derive_seed(0), 2 ** 63)


class ForwardNoiseTestCase(SimpleTestCase):
    def setUp(self):
        self.noise = PowerMeanNoise(1).double()
        self.x0 = torch.zeros(100_000, 1, dtype=torch.float64)

    def _residual_std(self, t_value, seed=0):
        t = torch.full((self.x0.shape[0],), t_value, dtype=torch.float64)
        x_hat, sigma = forward_noise_numeric(self.x0, t, self.noise, make_generator(seed))
        return float((x_hat - self.x0).std()), float(sigma[0, 0])

    def test_zero_noise(self):
        """Test a zero draw leaves the values unchanged"""
        x0 = torch.randn(5, 3, dtype=torch.float64)
        x_hat, _ = forward_noise_numeric(
            x0, torch.rand(5, dtype=torch.float64), PowerMeanNoise(3).double(), eps=torch.zeros(5, 3, dtype=torch.float64)
        )
        self.assertTrue(torch.equal(x_hat, x0))

    def test_endpoint_marginals(self):
        """Test the noise std at t=0 and t=1 matches sigma_min and sigma_max"""
        std, sigma = self._residual_std(0.0)
        self.assertAlmostEqual(sigma, 0.002, places=12)
        self.assertAlmostEqual(std / 0.002, 1.0, delta=0.02)
        std, sigma = self._residual_std(1.0, seed=1)
        self.assertAlmostEqual(sigma, 80.0, places=9)
        self.assertAlmostEqual(std / 80.0, 1.0, delta=0.02)

    def test_interior_marginals(self):
        """Test mean and std of the noise at interior times"""
        for i, t_value in enumerate((0.1, 0.5, 0.9)):
            t = torch.full((self.x0.shape[0],), t_value, dtype=torch.float64)
            x_hat, sigma = forward_noise_numeric(self.x0, t, self.noise, make_generator(10 + i))
            residual = x_hat - self.x0
            expected = float(sigma[0, 0])
            self.assertAlmostEqual(float(residual.std()) / expected, 1.0, delta=0.01)
            self.assertLess(abs(float(residual.mean())), 0.02 * expected)

    def test_per_feature_schedules(self):
        """Test each feature uses its own rho"""
        noise = PowerMeanNoise(2).double()
        with torch.no_grad():
            noise.log_rho[1] = 0.0
        sigma = noise(torch.tensor([0.5], dtype=torch.float64))
        self.assertAlmostEqual(float(sigma[0, 1]), 40.001, places=9)
        self.assertNotAlmostEqual(float(sigma[0, 0]), 40.001, places=3)


class ForwardMaskTestCase(SimpleTestCase):
    def setUp(self):
        self.layout = flat_layout(100)
        self.tokens = torch.full((1000, self.layout.length), 9, dtype=torch.long)
        self.tokens[:, :2] = torch.tensor([2, 4])

    def _mask(self, t_value, seed=0, schedule=None):
        t = torch.full((self.tokens.shape[0],), t_value)
        return forward_mask_text(self.tokens, t, self.layout, MASK_ID, make_generator(seed), schedule)

    def test_endpoints(self):
        """Test t=0 masks nothing and t=1 masks every non-prompt position"""
        masked, mask = self._mask(0.0)
        self.assertFalse(mask.any())
        self.assertTrue(torch.equal(masked, self.tokens))
        masked, mask = self._mask(1.0)
        self.assertTrue(mask[:, 2:].all())
        self.assertFalse(mask[:, :2].any())
        self.assertTrue(torch.equal(masked[:, :2], self.tokens[:, :2]))

    def test_mask_fraction(self):
        """Test the empirical mask fraction at t=0.3 over 10^5 tokens"""
        masked, mask = self._mask(0.3, seed=3)
        fraction = float(mask[:, 2:].double().mean())
        self.assertAlmostEqual(fraction, 0.3, delta=0.005)
        self.assertTrue(torch.equal(masked == MASK_ID, mask))

    def test_mask_fraction_grid(self):
        """Test mask fractions at t in {0.1, 0.5, 0.9} for both schedules"""
        for kind in ('linear', 'cosine'):
            schedule = MaskSchedule(kind)
            for i, t_value in enumerate((0.1, 0.5, 0.9)):
                _, mask = self._mask(t_value, seed=20 + i, schedule=schedule)
                expected = 1.0 - float(schedule.alpha_bar(t_value))
                self.assertAlmostEqual(float(mask[:, 2:].double().mean()), expected, delta=0.005)

    def test_numeric_slots_untouched(self):
        """Test [NUM] slots are never masked"""
        table, vocabulary, layout, tokens, numbers, _ = toy_setup(n=16)
        _, mask = forward_mask_text(tokens, torch.ones(16), layout, vocabulary.mask_id)
        self.assertFalse(mask[:, layout.numeric_positions].any())


class SharedTimeTestCase(SimpleTestCase):
    def test_one_time_drives_both(self):
        """Test a record's t sets both its mask rate and its noise level"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup(n=2)
        x0 = torch.as_tensor(numbers)
        batch = corrupt(tokens, x0, layout, denoiser.noise, vocabulary.mask_id,
                        make_generator(0), t=torch.tensor([0.0, 1.0], dtype=torch.float64))
        self.assertFalse(batch.mask[0].any())
        self.assertEqual(int(batch.mask[1].sum()), layout.generation_length)
        np.testing.assert_allclose(batch.sigma[0].numpy(), 0.002)
        np.testing.assert_allclose(batch.sigma[1].numpy(), 80.0)

    def test_sampled_times(self):
        """Test sampled per-record times match the realized noise levels"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup(n=32)
        batch = corrupt(tokens, torch.as_tensor(numbers), layout, denoiser.noise,
                        vocabulary.mask_id, make_generator(5))
        torch.testing.assert_close(batch.sigma, denoiser.noise(batch.t))
        self.assertTrue(((batch.t >= 0) & (batch.t <= 1)).all())


class LossTestCase(SimpleTestCase):
    def test_lambda_weight(self):
        """Test the warm-up weight formula"""
        self.assertEqual(lambda_weight(0), 0.0)
        self.assertEqual(lambda_weight(1000, 1.0, 2000), 0.5)
        self.assertEqual(lambda_weight(2000), 1.0)
        self.assertEqual(lambda_weight(10 ** 6), 1.0)
        with self.assertRaises(ValueError):
            lambda_weight(-1)

    def test_zero_loss(self):
        """Test no masks and perfect numerics give zero loss"""
        x0 = torch.randn(3, 2, dtype=torch.float64)

        class Perfect:
            def denoise(self, tokens, x_noisy, sigma):
                return torch.zeros(3, 5, 7, dtype=torch.float64), x0.clone()

        batch = NoisyBatch(
            tokens=torch.zeros(3, 5, dtype=torch.long), mask=torch.zeros(3, 5, dtype=torch.bool),
            x_noisy=x0 + 1.0, sigma=torch.ones(3, 2), clean_tokens=torch.zeros(3, 5, dtype=torch.long),
            x0=x0, t=torch.zeros(3),
        )
        total, report = compute_loss(Perfect(), batch, step=5000)
        self.assertEqual(float(total), 0.0)
        self.assertEqual(report, LossReport(step=5000, l_text=0.0, l_num=0.0, lam=1.0, total=0.0))

    def test_warmup_start(self):
        """Test at step 0 the total equals the text loss"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup(n=8)
        batch = corrupt(tokens, torch.as_tensor(numbers), layout, denoiser.noise,
                        vocabulary.mask_id, make_generator(0))
        _, report = compute_loss(denoiser, batch, step=0)
        self.assertEqual(report.total, report.l_text)
        self.assertGreater(report.l_num, 0.0)

    def test_text_loss_sums_masked_positions(self):
        """Test text loss sums cross-entropy over masked positions per record"""
        logits = torch.zeros(2, 3, 4, dtype=torch.float64)
        clean = torch.zeros(2, 3, dtype=torch.long)
        mask = torch.tensor([[True, True, False], [False, False, False]])
        expected = 2 * np.log(4) / 2
        self.assertAlmostEqual(float(text_loss(logits, clean, mask)), expected, places=12)
        elbo = text_loss(logits, clean, mask, torch.tensor([0.5, 0.5]), mode='elbo')
        self.assertAlmostEqual(float(elbo), 2 * expected, places=12)

    def test_numeric_loss(self):
        """Test numeric loss sums features and averages records"""
        pred = torch.tensor([[1.0, 2.0], [0.0, 0.0]])
        target = torch.tensor([[0.0, 0.0], [0.0, 1.0]])
        self.assertAlmostEqual(float(numeric_loss(pred, target)), (5.0 + 1.0) / 2)

    def test_gradients_match_finite_differences(self):
        """Test total-loss gradients against central differences through every pathway"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup(n=8, seed=2)
        denoiser.train()
        batch = corrupt(tokens, torch.as_tensor(numbers), layout, denoiser.noise,
                        vocabulary.mask_id, make_generator(1))

        def objective():
            return compute_loss(denoiser, batch, step=1000)[0]

        denoiser.zero_grad()
        objective().backward()
        groups = {
            'projectors': [p for p in denoiser.projectors.parameters() if p.requires_grad],
            'noise_emb': list(denoiser.backbone.noise_emb.parameters()),
            'backbone': [p for n, p in denoiser.backbone.named_parameters() if not n.startswith('noise_emb.')],
        }
        rng = np.random.default_rng(0)
        eps = 1e-6
        checked = 0
        for name, params in groups.items():
            for _ in range(70 if name != 'backbone' else 80):
                param = params[rng.integers(len(params))]
                index = tuple(int(rng.integers(s)) for s in param.shape)
                analytic = float(param.grad[index])
                with torch.no_grad():
                    original = float(param[index])
                    param[index] = original + eps
                    plus = float(objective())
                    param[index] = original - eps
                    minus = float(objective())
                    param[index] = original
                numeric = (plus - minus) / (2 * eps)
                scale = max(abs(analytic), abs(numeric))
                self.assertLessEqual(abs(analytic - numeric), 1e-4 * scale + 1e-6, name)
                checked += 1
        self.assertGreaterEqual(checked, 200)


class DenoiserTestCase(SimpleTestCase):
    def test_output_shapes(self):
        """Test denoise returns token logits and one prediction per numeric column"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup(n=4)
        x = torch.as_tensor(numbers)
        logits, x_pred = denoiser.denoise(tokens, x, torch.ones_like(x))
        self.assertEqual(tuple(logits.shape), (4, layout.length, len(vocabulary)))
        self.assertEqual(tuple(x_pred.shape), (4, 2))

    def test_edm_input_scaling(self):
        """Test edm scaling feeds x / sqrt(sigma^2 + 1) to the encoder"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup(n=2)
        denoiser.eval()
        x = torch.as_tensor(numbers)
        sigma = torch.full_like(x, 3.0)
        plain = denoiser.denoise(tokens, x / np.sqrt(10.0), sigma)[1]
        denoiser.input_scaling = InputScaling.EDM
        scaled = denoiser.denoise(tokens, x, sigma)[1]
        torch.testing.assert_close(plain, scaled)

    def test_mismatched_widths(self):
        """Test a backbone with too short a max_len is rejected"""
        table = gen_mathexpr(8, seed=0)
        vocabulary = build_vocabulary(table_corpus(table))
        layout = build_layout(table, vocabulary)
        with self.assertRaises(ImproperlyConfigured):
            build_denoiser(FloatCodec(8), layout, len(vocabulary),
                           BackboneConfig(layers=1, model_dim=16, heads=2, ff_dim=32, max_len=4),
                           PowerMeanNoise(2))


class TrainerTestCase(SimpleTestCase):
    def _trainer(self, denoiser, tokens, numbers, layout, vocabulary, **overrides):
        options = dict(epochs=2, batch_size=16, lr=1e-3, seed=3, s_warm=4)
        options.update(overrides)
        return Trainer(denoiser, TrainingConfig(**options), tokens, numbers, layout, vocabulary.mask_id)

    def test_learning_rate_schedule(self):
        """Test linear warm-up then linear decay to zero"""
        factor = warmup_linear_decay(100, 0.1)
        self.assertAlmostEqual(factor(0), 0.1)
        self.assertAlmostEqual(factor(9), 1.0)
        self.assertAlmostEqual(factor(10), 1.0)
        self.assertAlmostEqual(factor(55), 0.5)
        self.assertAlmostEqual(factor(100), 0.0)

    def test_frozen_codec_unchanged(self):
        """Test training leaves the codec parameters bit-identical"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup(dropout=0.1, dtype=torch.float32)
        before = denoiser.codec.checksum()
        self._trainer(denoiser, tokens, numbers, layout, vocabulary).run()
        self.assertEqual(denoiser.codec.checksum(), before)
        self.assertFalse(denoiser.codec.training)

    def test_resume_matches_uninterrupted(self):
        """Test stopping and resuming reproduces an uninterrupted run exactly"""
        table, vocabulary, layout, tokens, numbers, straight = toy_setup(dropout=0.1)
        self._trainer(straight, tokens, numbers, layout, vocabulary).run()

        _, _, _, _, _, first = toy_setup(dropout=0.1)
        partial = self._trainer(first, tokens, numbers, layout, vocabulary)
        partial.run(until=3)
        state = copy.deepcopy(partial.state_dict())

        _, _, _, _, _, second = toy_setup(dropout=0.1)
        resumed = self._trainer(second, tokens, numbers, layout, vocabulary)
        resumed.load_state_dict(state)
        resumed.run()
        self.assertEqual(resumed.step, 8)
        for (name, a), b in zip(straight.state_dict().items(), second.state_dict().values()):
            self.assertTrue(torch.equal(a, b), name)

    def test_train_log(self):
        """Test one JSON line per step with the loss components"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup()
        with tempfile.TemporaryDirectory() as tmp:
            trainer = Trainer(
                denoiser, TrainingConfig(epochs=1, batch_size=16, seed=0), tokens, numbers,
                layout, vocabulary.mask_id, out_dir=tmp,
                validation=(tokens[:8], numbers[:8]),
            )
            trainer.run()
            lines = Path(tmp, 'train_log.jsonl').read_text().splitlines()
        self.assertEqual(len(lines), 4)
        record = json.loads(lines[-1])
        self.assertEqual(record['step'], 3)
        for key in ('l_text', 'l_num', 'lambda', 'total', 'lr', 'wall_time'):
            self.assertIn(key, record)

    def test_checkpoint_callback(self):
        """Test the checkpoint callback fires every N steps and at the end"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup()
        seen = []
        trainer = Trainer(
            denoiser, TrainingConfig(epochs=2, batch_size=16, checkpoint_every=3), tokens, numbers,
            layout, vocabulary.mask_id, on_checkpoint=lambda t: seen.append(t.step),
        )
        trainer.run()
        self.assertEqual(seen, [3, 6, 8])

    def test_loss_decreases(self):
        """Test a short run lowers the training loss"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup(dtype=torch.float32)
        trainer = self._trainer(denoiser, tokens, numbers, layout, vocabulary, epochs=30, s_warm=0)
        trainer.run()
        first = np.mean([r['l_text'] for r in trainer.history[:4]])
        last = np.mean([r['l_text'] for r in trainer.history[-4:]])
        self.assertLess(last, first)

    def test_non_finite_loss(self):
        """Test a NaN loss aborts with its report"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup()
        with torch.no_grad():
            denoiser.backbone.head_bias.fill_(float('nan'))
        trainer = self._trainer(denoiser, tokens, numbers, layout, vocabulary)
        with self.assertRaises(NonFiniteLossError) as ctx:
            trainer.run()
        self.assertEqual(ctx.exception.report.step, 0)

    def test_learnable_rho_trains(self):
        """Test a learnable schedule receives gradients through the numeric loss"""
        table, vocabulary, layout, tokens, numbers, denoiser = toy_setup(learnable=True)
        before = denoiser.noise.log_rho.detach().clone()
        self._trainer(denoiser, tokens, numbers, layout, vocabulary, s_warm=0).run(until=2)
        self.assertFalse(torch.equal(before, denoiser.noise.log_rho.detach()))
