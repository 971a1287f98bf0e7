import numpy as np
import torch
from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from tabular.generators import gen_profilebio

from .networks import FloatCodec, NumericProjectors, decode_hidden, encode_value
from .normalizers import QuantileNormalizer, denormalize, fit_normalizer, normalize
from .services import (
    CodecConvergenceError, default_grid, fit_table_normalizers, load_codec,
    normalize_table, normalizers_from_state, normalizers_state, pretrain_codec,
    roundtrip_error, save_codec,
)

_PRETRAINED = {}


def pretrained_codec(r=8):
    if r not in _PRETRAINED:
        _PRETRAINED[r] = pretrain_codec(r=r, rng=0)
    return _PRETRAINED[r]


class QuantileNormalizerTestCase(SimpleTestCase):
    def setUp(self):
        self.values = np.random.default_rng(0).normal(5.0, 2.0, size=10_000)
        self.normalizer = fit_normalizer(self.values)

    def test_standard_normal_output(self):
        """Test normalized training data is centred with unit spread"""
        z = normalize(self.values, self.normalizer)
        self.assertLess(abs(z.mean()), 0.05)
        self.assertAlmostEqual(z.std(), 1.0, delta=0.05)
        self.assertAlmostEqual(float(np.median(z)), 0.0, delta=0.02)

    def test_median_maps_to_zero(self):
        """Test the training median maps to the normal median"""
        values = np.random.default_rng(1).uniform(-3, 9, size=999)
        normalizer = fit_normalizer(values)
        self.assertAlmostEqual(float(normalizer.normalize([np.median(values)])[0]), 0.0, places=9)

    def test_round_trip(self):
        """Test denormalize inverts normalize on training values"""
        back = denormalize(normalize(self.values, self.normalizer), self.normalizer)
        np.testing.assert_allclose(back, self.values, rtol=0, atol=1e-9)

    def test_endpoints_and_clamp(self):
        """Test the minimum maps lowest and out-of-range latents clamp"""
        z = self.normalizer.normalize(self.values)
        self.assertEqual(z.argmin(), self.values.argmin())
        self.assertEqual(float(self.normalizer.denormalize([50.0])[0]), self.values.max())
        self.assertEqual(float(self.normalizer.denormalize([-50.0])[0]), self.values.min())

    @settings(max_examples=100, deadline=None)
    @given(a=st.floats(min_value=-10, max_value=20), b=st.floats(min_value=-10, max_value=20))
    def test_monotone(self, a, b):
        """Test x1 < x2 implies normalize(x1) <= normalize(x2)"""
        lo, hi = min(a, b), max(a, b)
        z = self.normalizer.normalize([lo, hi])
        self.assertLessEqual(z[0], z[1])

    def test_degenerate_column(self):
        """Test a constant column yields a flagged degenerate normalizer"""
        normalizer = fit_normalizer([3.0] * 20)
        self.assertTrue(normalizer.degenerate)
        np.testing.assert_array_equal(normalizer.normalize([3.0, 3.0]), [0.0, 0.0])
        np.testing.assert_array_equal(normalizer.denormalize([1.7]), [3.0])

    def test_missing_values(self):
        """Test all-missing columns fail and partial ones are mean-imputed"""
        with self.assertRaises(ValueError):
            fit_normalizer([np.nan, np.nan])
        normalizer = fit_normalizer([1.0, np.nan, 3.0, 5.0])
        self.assertEqual(float(normalizer.denormalize(normalizer.normalize([3.0]))[0]), 3.0)

    def test_non_finite_input(self):
        """Test non-finite inputs are rejected"""
        with self.assertRaises(ValueError):
            self.normalizer.normalize([np.inf])
        with self.assertRaises(ValueError):
            self.normalizer.denormalize([np.nan])
        with self.assertRaises(ValueError):
            QuantileNormalizer().normalize([1.0])

    def test_state_round_trip(self):
        """Test a normalizer rebuilt from its state behaves identically"""
        rebuilt = QuantileNormalizer.from_state(self.normalizer.state_dict())
        probe = np.linspace(-2, 12, 57)
        np.testing.assert_array_equal(rebuilt.normalize(probe), self.normalizer.normalize(probe))
        np.testing.assert_array_equal(
            rebuilt.denormalize(np.linspace(-6, 6, 31)),
            self.normalizer.denormalize(np.linspace(-6, 6, 31)),
        )

    def test_table_normalizers(self):
        """Test per-column normalizers over a generated table"""
        table = gen_profilebio(500, seed=0)
        normalizers = fit_table_normalizers(table)
        self.assertEqual(sorted(normalizers), ['age', 'salary'])
        restored = normalizers_from_state(normalizers_state(normalizers))
        np.testing.assert_array_equal(normalize_table(table, restored), normalize_table(table, normalizers))
        self.assertEqual(normalize_table(table, normalizers).shape, (500, 2))


class FloatCodecTestCase(SimpleTestCase):
    def test_hidden_width(self):
        """Test the encoder hidden width rule"""
        self.assertEqual(FloatCodec(16).hidden_width, 4)
        self.assertEqual(FloatCodec(4).hidden_width, 4)
        self.assertEqual(FloatCodec(512).hidden_width, 22)

    def test_pretrained_round_trip(self):
        """Test the pretrained codec passes the round-trip gate"""
        codec, stats = pretrained_codec()
        self.assertLessEqual(stats.mean_error, 1e-3)
        self.assertLessEqual(stats.max_error, 1e-2)
        with torch.no_grad():
            self.assertLessEqual(abs(float(codec(torch.zeros(1, dtype=torch.float64))[0])), 1e-3)

    def test_untrained_codec_reports(self):
        """Test round-trip error on an untrained codec is reported"""
        stats = roundtrip_error(FloatCodec(16).double(), default_grid())
        self.assertGreater(stats.mean_error, 1e-3)
        self.assertTrue(np.isfinite(stats.max_error))

    def test_non_convergence(self):
        """Test a starved pretraining run raises with its statistics"""
        with self.assertRaises(CodecConvergenceError) as ctx:
            pretrain_codec(r=4, epochs=1, polish_steps=0, rng=0)
        self.assertGreater(ctx.exception.stats.mean_error, 1e-3)
        codec, stats = pretrain_codec(r=4, epochs=1, polish_steps=0, rng=0, strict=False)
        self.assertTrue(codec.frozen)

    def test_frozen(self):
        """Test a frozen codec has no trainable parameters and stays in eval mode"""
        codec, _ = pretrained_codec()
        self.assertFalse(any(p.requires_grad for p in codec.parameters()))
        codec.train()
        self.assertFalse(codec.training)

    def test_save_and_load(self):
        """Test a saved codec reloads with identical weights"""
        import tempfile
        from pathlib import Path
        codec, _ = pretrained_codec()
        with tempfile.TemporaryDirectory() as tmp:
            save_codec(codec, Path(tmp) / 'codec.pt')
            loaded = load_codec(Path(tmp) / 'codec.pt')
        self.assertEqual(loaded.checksum(), codec.checksum())
        self.assertTrue(loaded.frozen)


class NumericProjectorsTestCase(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.codec = FloatCodec(8).double().freeze()
        self.projectors = NumericProjectors(8, 16).double().eval()

    def test_shapes(self):
        """Test encode gives D-vectors and decode gives scalars"""
        z = encode_value(torch.tensor([0.3, -1.2], dtype=torch.float64), self.codec, self.projectors)
        self.assertEqual(tuple(z.shape), (2, 16))
        x = decode_hidden(z, self.codec, self.projectors)
        self.assertEqual(tuple(x.shape), (2,))
        self.assertEqual(self.projectors.hidden_width, 64)

    def test_deterministic(self):
        """Test inference-mode encoding and decoding are repeatable"""
        x = torch.tensor([0.5], dtype=torch.float64)
        self.assertTrue(torch.equal(
            encode_value(x, self.codec, self.projectors), encode_value(x, self.codec, self.projectors)
        ))
        h = torch.randn(3, 16, dtype=torch.float64)
        self.assertTrue(torch.equal(
            decode_hidden(h, self.codec, self.projectors), decode_hidden(h, self.codec, self.projectors)
        ))

    def test_zero_hidden(self):
        """Test decoding a zero vector is finite"""
        x = decode_hidden(torch.zeros(16, dtype=torch.float64), self.codec, self.projectors)
        self.assertTrue(torch.isfinite(x).all())

    def test_dimension_mismatch(self):
        """Test mismatched sizes raise configuration errors"""
        with self.assertRaises(ImproperlyConfigured):
            decode_hidden(torch.zeros(3, 12, dtype=torch.float64), self.codec, self.projectors)
        with self.assertRaises(ImproperlyConfigured):
            encode_value(torch.zeros(2), FloatCodec(4).double(), self.projectors)

    def test_lipschitz(self):
        """Test a tiny input perturbation moves the embedding within the estimated Lipschitz bound"""
        grid = torch.linspace(-4, 4, 801, dtype=torch.float64)
        with torch.no_grad():
            z = encode_value(grid, self.codec, self.projectors)
            slopes = (z[1:] - z[:-1]).norm(dim=-1) / (grid[1:] - grid[:-1])
            bound = 2.0 * float(slopes.max())
            x = torch.tensor([0.37], dtype=torch.float64)
            delta = (encode_value(x + 1e-8, self.codec, self.projectors)
                     - encode_value(x, self.codec, self.projectors)).norm()
        self.assertLessEqual(float(delta), bound * 1e-8 + 1e-12)

    def test_gradcheck(self):
        """Test projector gradients against central finite differences"""
        latent = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        hidden = torch.randn(3, 16, dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(
            self.projectors.project_in, (latent,), eps=1e-6, atol=1e-8, rtol=1e-4,
        ))
        self.assertTrue(torch.autograd.gradcheck(
            self.projectors.project_out, (hidden,), eps=1e-6, atol=1e-8, rtol=1e-4,
        ))

    def test_projector_round_trip(self):
        """Test projectors trained on a pretrained codec reproduce their input"""
        codec, _ = pretrained_codec()
        torch.manual_seed(1)
        projectors = NumericProjectors(8, 16, dropout=0.0).double()
        optimizer = torch.optim.Adam(projectors.parameters(), lr=3e-3)
        grid = torch.linspace(-3, 3, 301, dtype=torch.float64)
        for _ in range(1500):
            optimizer.zero_grad()
            recon = decode_hidden(encode_value(grid, codec, projectors), codec, projectors)
            loss = torch.mean((recon - grid) ** 2)
            loss.backward()
            optimizer.step()
        projectors.eval()
        with torch.no_grad():
            recon = decode_hidden(encode_value(grid, codec, projectors), codec, projectors)
        self.assertLess(float((recon - grid).abs().mean()), 2e-2)
