import math

import numpy as np
import torch
from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase

from numcodec.services import fit_table_normalizers
from tabular.generators import MATHEXPR_SCHEMA, gen_mathexpr, gen_profilebio
from tabular.schema import Table

from .layout import (
    SerializationError, TokenLayout, build_layout, detokenize_row,
    serialize_record, serialize_table,
)
from .networks import BackboneConfig, LoRALinear, TabularMDLM
from .vocabulary import SPECIAL_TOKENS, Vocabulary, build_vocabulary, pretokenize, table_corpus

TABLE_ROW = {
    'x1': 2.75, 'x2': 6.40, 'operation_x1': 'sin', 'operation_x2': 'log',
    'operation_between': 'mul', 'latex_expression': '\\sin(2.75) \\times \\log(6.40)',
}


def tiny_config(**overrides):
    options = dict(layers=2, model_dim=32, heads=2, ff_dim=64, max_len=64, dropout=0.0)
    options.update(overrides)
    return BackboneConfig(**options)


class VocabularyTestCase(SimpleTestCase):
    def setUp(self):
        self.table = gen_mathexpr(300, seed=0)
        self.vocabulary = build_vocabulary(table_corpus(self.table))

    def test_specials_first(self):
        """Test special tokens take the first ids in a fixed order"""
        self.assertEqual(tuple(self.vocabulary.tokens[:len(SPECIAL_TOKENS)]), SPECIAL_TOKENS)
        self.assertEqual((self.vocabulary.pad_id, self.vocabulary.mask_id), (0, 1))

    def test_pretokenize(self):
        """Test pretokenization splits commands, digits and spaces"""
        self.assertEqual(
            pretokenize('\\sin(2.75) \\times x'),
            ['\\sin', '(', '2', '.', '7', '5', ')', ' \\times', ' x'],
        )

    def test_round_trip(self):
        """Test encode/decode reproduces text exactly"""
        for text in list(self.table.column('latex_expression')) + ['', 'New  York', 'tab\there']:
            self.assertEqual(self.vocabulary.decode(self.vocabulary.encode(text)), text)

    def test_unknown_character(self):
        """Test characters outside the vocabulary map to [UNK]"""
        self.assertEqual(self.vocabulary.encode('€'), [self.vocabulary.unk_id])

    def test_deterministic(self):
        """Test the vocabulary and its hash depend only on the corpus"""
        again = build_vocabulary(table_corpus(self.table))
        self.assertEqual(again.tokens, self.vocabulary.tokens)
        self.assertEqual(again.vocabulary_hash, self.vocabulary.vocabulary_hash)
        restored = Vocabulary.from_dict(self.vocabulary.to_dict())
        self.assertEqual(restored.vocabulary_hash, self.vocabulary.vocabulary_hash)

    def test_mask_absent_from_clean_rows(self):
        """Test [MASK] never appears in serialized training rows"""
        layout = build_layout(self.table, self.vocabulary)
        tokens, _ = serialize_table(self.table, layout, self.vocabulary)
        self.assertFalse((tokens == self.vocabulary.mask_id).any())


class LayoutTestCase(SimpleTestCase):
    def setUp(self):
        self.table = gen_mathexpr(300, seed=0)
        self.vocabulary = build_vocabulary(table_corpus(self.table))
        self.layout = build_layout(self.table, self.vocabulary)

    def test_spans_cover_sequence(self):
        """Test prompt, spans and numeric slots are disjoint and exhaustive"""
        covered = list(range(self.layout.prompt_length))
        for span in self.layout.spans:
            covered += list(range(span.offset, span.offset + span.width))
        covered += self.layout.numeric_positions
        self.assertEqual(covered, list(range(self.layout.length)))
        self.assertEqual(
            [span.name for span in self.layout.spans],
            ['operation_x1', 'operation_x2', 'operation_between', 'latex_expression'],
        )

    def test_table_row(self):
        """Test the sin/log/mul row has two [NUM] slots and a decodable latex span"""
        ids, numbers = serialize_record(TABLE_ROW, MATHEXPR_SCHEMA, self.layout, self.vocabulary)
        self.assertEqual(ids.count(self.vocabulary.num_id), 2)
        self.assertEqual(
            [ids[p] for p in self.layout.numeric_positions], [self.vocabulary.num_id] * 2
        )
        np.testing.assert_array_equal(numbers, [2.75, 6.40])
        span = self.layout.span('latex_expression')
        text = self.vocabulary.decode(
            [t for t in ids[span.offset:span.offset + span.width] if t != self.vocabulary.pad_id]
        )
        self.assertEqual(text, TABLE_ROW['latex_expression'])

    def test_normalized_numbers(self):
        """Test numeric values are normalized when normalizers are given"""
        normalizers = fit_table_normalizers(self.table)
        _, numbers = serialize_record(
            TABLE_ROW, MATHEXPR_SCHEMA, self.layout, self.vocabulary, normalizers=normalizers
        )
        self.assertAlmostEqual(numbers[0], normalizers['x1'].normalize([2.75])[0])

    def test_empty_text(self):
        """Test an empty text field becomes an all-[PAD] span"""
        ids, _ = serialize_record(
            dict(TABLE_ROW, latex_expression=''), MATHEXPR_SCHEMA, self.layout, self.vocabulary
        )
        span = self.layout.span('latex_expression')
        self.assertEqual(set(ids[span.offset:span.offset + span.width]), {self.vocabulary.pad_id})

    def test_unknown_category(self):
        """Test an unknown category raises"""
        with self.assertRaises(SerializationError):
            serialize_record(
                dict(TABLE_ROW, operation_x1='abs'), MATHEXPR_SCHEMA, self.layout, self.vocabulary
            )

    def test_overlong_text(self):
        """Test overlong text fails or truncates per policy"""
        record = dict(TABLE_ROW, latex_expression='1.00 + ' * 40)
        with self.assertRaises(SerializationError):
            serialize_record(record, MATHEXPR_SCHEMA, self.layout, self.vocabulary)
        ids, _ = serialize_record(
            record, MATHEXPR_SCHEMA, self.layout, self.vocabulary, truncation='truncate'
        )
        self.assertEqual(len(ids), self.layout.length)

    def test_round_trip_rows(self):
        """Test serialize then detokenize returns identical fields over 1000 rows"""
        for table in (gen_mathexpr(1000, seed=5), gen_profilebio(1000, seed=5)):
            vocabulary = build_vocabulary(table_corpus(table))
            layout = build_layout(table, vocabulary)
            tokens, _ = serialize_table(table, layout, vocabulary)
            for row, record in zip(tokens.tolist(), table.records()):
                fields, valid = detokenize_row(row, layout, vocabulary, table.schema)
                self.assertTrue(valid)
                for span in layout.spans:
                    self.assertEqual(fields[span.name], record[span.name])

    def test_invalid_rows(self):
        """Test masks, content after padding and unknown categories invalidate a row"""
        ids, _ = serialize_record(TABLE_ROW, MATHEXPR_SCHEMA, self.layout, self.vocabulary)
        latex = self.layout.span('latex_expression')
        op = self.layout.span('operation_x1')

        masked = list(ids)
        masked[latex.offset] = self.vocabulary.mask_id
        self.assertFalse(detokenize_row(masked, self.layout, self.vocabulary, MATHEXPR_SCHEMA)[1])

        gap = list(ids)
        gap[latex.offset + latex.width - 1] = self.vocabulary.encode('x')[0]
        self.assertEqual(gap[latex.offset + latex.width - 2], self.vocabulary.pad_id)
        self.assertFalse(detokenize_row(gap, self.layout, self.vocabulary, MATHEXPR_SCHEMA)[1])

        wrong = list(ids)
        wrong[op.offset:op.offset + op.width] = [self.vocabulary.encode('q')[0]] + [self.vocabulary.pad_id] * (op.width - 1)
        fields, valid = detokenize_row(wrong, self.layout, self.vocabulary, MATHEXPR_SCHEMA)
        self.assertFalse(valid)
        self.assertIsNone(fields['operation_x1'])
        self.assertEqual(fields['operation_between'], 'mul')

    def test_layout_serialization(self):
        """Test a layout survives to_dict/from_dict"""
        self.assertEqual(TokenLayout.from_dict(self.layout.to_dict()), self.layout)


class BackboneConfigTestCase(SimpleTestCase):
    def test_heads_divide_width(self):
        """Test model_dim must be divisible by heads"""
        with self.assertRaises(ImproperlyConfigured):
            BackboneConfig(model_dim=30, heads=4)
        self.assertEqual(BackboneConfig().to_dict()['model_dim'], 128)


class BackboneTestCase(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.model = TabularMDLM(tiny_config(), vocab_size=20, numeric_positions=(6, 7)).double().eval()
        self.tokens = torch.tensor([[2, 8, 9, 4, 10, 11, 5, 5]])
        self.latents = torch.randn(1, 2, 32, dtype=torch.float64)

    def test_noise_embedding_only_on_numeric_positions(self):
        """Test changing sigma changes numeric-position embeddings only"""
        low = self.model.embed(self.tokens, self.latents, torch.full((1, 2), 0.002, dtype=torch.float64))
        high = self.model.embed(self.tokens, self.latents, torch.full((1, 2), 80.0, dtype=torch.float64))
        self.assertTrue(torch.equal(low[:, :6], high[:, :6]))
        self.assertFalse(torch.allclose(low[:, 6:], high[:, 6:]))

    def test_noise_embedding_separates_endpoints(self):
        """Test noise embeddings at sigma_min and sigma_max are not collinear"""
        emb = self.model.noise_emb(torch.tensor([0.002, 80.0], dtype=torch.float64))
        self.assertLess(float(torch.cosine_similarity(emb[0], emb[1], dim=0)), 0.99)

    def test_pure_token_path(self):
        """Test a model without numeric slots embeds tokens only"""
        model = TabularMDLM(tiny_config(use_positions=False), vocab_size=20).double().eval()
        out = model.embed(self.tokens)
        self.assertTrue(torch.equal(out, model.tok_emb(self.tokens)))

    def test_latent_count_mismatch(self):
        """Test the wrong number of numeric latents raises"""
        with self.assertRaises(ValueError):
            self.model.embed(self.tokens, self.latents[:, :1], torch.ones(1, 1, dtype=torch.float64))

    def test_length_overflow(self):
        """Test sequences longer than max_len raise"""
        model = TabularMDLM(tiny_config(max_len=4), vocab_size=20)
        with self.assertRaises(ValueError):
            model(torch.zeros(1, 5, dtype=torch.long))

    def test_softmax_normalized(self):
        """Test softmax over logits sums to one"""
        _, logits = self.model(self.tokens, self.latents, torch.ones(1, 2, dtype=torch.float64))
        np.testing.assert_allclose(logits.softmax(-1).sum(-1).detach().numpy(), 1.0, atol=1e-6)

    def test_deterministic(self):
        """Test inference with identical inputs is bit-identical"""
        sigma = torch.ones(1, 2, dtype=torch.float64)
        _, a = self.model(self.tokens, self.latents, sigma)
        _, b = self.model(self.tokens, self.latents, sigma)
        self.assertTrue(torch.equal(a, b))

    def test_bidirectional(self):
        """Test changing the last input changes predictions at the first position"""
        sigma = torch.ones(1, 2, dtype=torch.float64)
        _, before = self.model(self.tokens, self.latents, sigma)
        changed = self.tokens.clone()
        changed[0, 5] = 1
        _, after = self.model(changed, self.latents, sigma)
        self.assertFalse(torch.allclose(before[0, 0], after[0, 0]))

    def test_equivariance_without_positions(self):
        """Test permuting two inputs permutes outputs when positions are off"""
        model = TabularMDLM(tiny_config(use_positions=False), vocab_size=20).double().eval()
        tokens = torch.tensor([[3, 7, 9, 12, 15]])
        swapped = tokens[:, [0, 3, 2, 1, 4]]
        h, _ = model(tokens)
        h_swapped, _ = model(swapped)
        torch.testing.assert_close(h_swapped, h[:, [0, 3, 2, 1, 4]])

    def test_hand_computed_attention(self):
        """Test a single-layer single-head forward against a numpy computation"""
        torch.manual_seed(3)
        config = BackboneConfig(layers=1, model_dim=8, heads=1, ff_dim=16, max_len=8, use_positions=False)
        model = TabularMDLM(config, vocab_size=6).double().eval()
        for param in model.parameters():
            torch.nn.init.normal_(param, std=0.3)
        tokens = torch.tensor([[1, 4, 2]])
        _, logits = model(tokens)

        p = {name: t.detach().numpy() for name, t in model.state_dict().items()}

        def layer_norm(x, prefix):
            mu = x.mean(-1, keepdims=True)
            var = ((x - mu) ** 2).mean(-1, keepdims=True)
            return (x - mu) / np.sqrt(var + 1e-5) * p[f'{prefix}.weight'] + p[f'{prefix}.bias']

        def linear(x, prefix):
            return x @ p[f'{prefix}.base.weight'].T + p[f'{prefix}.base.bias']

        x = p['tok_emb.weight'][[1, 4, 2]]
        a = layer_norm(x, 'blocks.0.ln_attn')
        q, k, v = (linear(a, f'blocks.0.{n}_proj') for n in 'qkv')
        scores = q @ k.T / math.sqrt(8)
        weights = np.exp(scores - scores.max(-1, keepdims=True))
        weights /= weights.sum(-1, keepdims=True)
        x = x + linear(weights @ v, 'blocks.0.out_proj')
        m = linear(layer_norm(x, 'blocks.0.ln_mlp'), 'blocks.0.fc1')
        m = 0.5 * m * (1 + np.vectorize(math.erf)(m / math.sqrt(2)))
        x = x + linear(m, 'blocks.0.fc2')
        h = layer_norm(x, 'ln_f')
        expected = h @ p['tok_emb.weight'].T + p['head_bias']
        np.testing.assert_allclose(logits[0].detach().numpy(), expected, rtol=1e-10, atol=1e-10)

    def test_gradients_match_finite_differences(self):
        """Test backward against central differences on 200 sampled parameters"""
        torch.manual_seed(1)
        model = TabularMDLM(tiny_config(), vocab_size=20, numeric_positions=(6, 7)).double().train()
        sigma = torch.tensor([[0.5, 3.0]], dtype=torch.float64)
        weights = torch.randn(1, 8, 20, dtype=torch.float64)

        def objective():
            _, logits = model(self.tokens, self.latents, sigma)
            return (logits * weights).sum()

        model.zero_grad()
        objective().backward()
        params = [p for p in model.parameters() if p.requires_grad]
        rng = np.random.default_rng(0)
        eps = 1e-6
        for _ in range(200):
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
            self.assertLessEqual(abs(analytic - numeric), 1e-4 * scale + 1e-6)


class LMHeadTestCase(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.model = TabularMDLM(tiny_config(), vocab_size=20).double()

    def test_zero_hidden(self):
        """Test a zero hidden state yields the bias logits"""
        with torch.no_grad():
            self.model.head_bias.copy_(torch.arange(20, dtype=torch.float64))
        logits = self.model.lm_head(torch.zeros(32, dtype=torch.float64))
        self.assertTrue(torch.equal(logits, self.model.head_bias))

    def test_shift_invariance(self):
        """Test argmax and softmax ignore a constant shift"""
        logits = self.model.lm_head(torch.randn(4, 32, dtype=torch.float64))
        self.assertTrue(torch.equal(logits.argmax(-1), (logits + 7.5).argmax(-1)))
        torch.testing.assert_close(logits.softmax(-1), (logits + 7.5).softmax(-1))

    def test_orthogonal_embedding(self):
        """Test an aligned hidden vector scores its own token highest"""
        with torch.no_grad():
            basis, _ = torch.linalg.qr(torch.randn(32, 20, dtype=torch.float64))
            self.model.tok_emb.weight.copy_(basis.T)
        for token in range(20):
            logits = self.model.lm_head(self.model.tok_emb.weight[token].detach())
            self.assertEqual(int(logits.argmax()), token)

    def test_tied_weights(self):
        """Test updating the embedding table changes the head"""
        hidden = torch.randn(32, dtype=torch.float64)
        before = self.model.lm_head(hidden).detach().clone()
        with torch.no_grad():
            self.model.tok_emb.weight[3] += hidden
        after = self.model.lm_head(hidden).detach()
        self.assertAlmostEqual(float(after[3] - before[3]), float(hidden @ hidden), places=8)
        torch.testing.assert_close(after[:3], before[:3])


class LoRATestCase(SimpleTestCase):
    def test_starts_at_base(self):
        """Test a fresh adapter leaves the base output unchanged"""
        layer = LoRALinear(8, 4, rank=2).eval()
        x = torch.randn(3, 8)
        torch.testing.assert_close(layer(x), layer.base(x))

    def test_only_adapters_train(self):
        """Test enabling adapters freezes base backbone weights"""
        model = TabularMDLM(tiny_config(lora_rank=4), vocab_size=20, numeric_positions=(6,))
        trainable = {n for n, p in model.named_parameters() if p.requires_grad}
        self.assertTrue(trainable)
        self.assertTrue(all('lora_' in n or n.startswith('noise_emb.') for n in trainable))
        self.assertFalse(model.tok_emb.weight.requires_grad)
