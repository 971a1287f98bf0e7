import json
import math
import tempfile
from pathlib import Path

import torch
import yaml
from django.conf import settings
from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase, TestCase, override_settings

from diffusion.sampler import UnmaskPolicy
from mdlm.layout import TruncationPolicy

from .config import (
    SamplerSettings, config_hash, load_run_config, parse_run_config, run_config_from_dict,
)
from .models import ExperimentRun
from .services import RunLedger, configure_runtime, shard_ranges


class RunConfigTestCase(SimpleTestCase):
    def test_defaults(self):
        """Test an empty document yields the default hyperparameters"""
        config = parse_run_config({})
        self.assertEqual(config.training.lr, 2e-4)
        self.assertEqual(config.training.warmup_ratio, 0.1)
        self.assertEqual(config.training.betas, (0.9, 0.98))
        self.assertEqual(config.training.lambda_max, 1.0)
        self.assertEqual(config.training.s_warm, 2000)
        self.assertEqual(config.schedule.sigma_min, 0.002)
        self.assertEqual(config.schedule.sigma_max, 80.0)
        self.assertEqual(config.schedule.rho, 7.0)
        self.assertEqual(config.codec.latent_dim, 16)
        self.assertEqual(config.backbone.lora_rank, 0)
        self.assertEqual(config.sampler.policy, UnmaskPolicy.CONFIDENCE)
        self.assertEqual(config.dataset.truncation, TruncationPolicy.FAIL)
        self.assertEqual(config.dataset.validation_truncation, TruncationPolicy.TRUNCATE)

    def test_none_document(self):
        """Test an empty YAML file counts as an empty document"""
        self.assertEqual(parse_run_config(None), parse_run_config({}))

    def test_hash_is_stable(self):
        """Test equal configurations hash equally and edits change the hash"""
        first = parse_run_config({'training': {'seed': 3}})
        second = parse_run_config({'training': {'seed': 3}})
        third = parse_run_config({'training': {'seed': 4}})
        self.assertEqual(config_hash(first), config_hash(second))
        self.assertNotEqual(first.config_hash, third.config_hash)
        self.assertEqual(len(first.config_hash), 64)

    def test_roundtrip_preserves_hash(self):
        """Test a stored configuration rebuilds to the same hash"""
        config = parse_run_config({
            'backbone': {'layers': 2, 'model_dim': 32, 'heads': 2},
            'sampler': {'s_churn': 0.5, 's_tmax': 10.0},
            'training': {'train_fraction': 0.9, 'dtype': 'float64'},
        })
        stored = json.loads(json.dumps(config.to_dict()))
        self.assertEqual(run_config_from_dict(stored).config_hash, config.config_hash)

    def test_invalid_heads(self):
        """Test model_dim not divisible by heads is rejected"""
        with self.assertRaises(ImproperlyConfigured):
            parse_run_config({'backbone': {'model_dim': 30, 'heads': 4}})

    def test_invalid_values(self):
        """Test out-of-range and unknown values are rejected"""
        for document in (
            {'sampler': {'policy': 'greedy'}},
            {'sampler': {'temperature': 0.0}},
            {'schedule': {'sigma_min': 100.0}},
            {'training': {'text_loss': 'focal'}},
            {'training': {'batch_size': 0}},
            {'dataset': {'truncation': 'drop'}},
            {'optimizer': {}},
            ['not', 'a', 'mapping'],
        ):
            with self.assertRaises(ImproperlyConfigured, msg=str(document)):
                parse_run_config(document)

    def test_sampler_settings(self):
        """Test sampler settings map onto the sampler configuration"""
        config = SamplerSettings(steps=10, s_churn=1.0).sampler_config(seed=5, policy=None)
        self.assertEqual(config.steps, 10)
        self.assertEqual(config.seed, 5)
        self.assertEqual(config.policy, UnmaskPolicy.CONFIDENCE)
        self.assertEqual(config.churn.s_churn, 1.0)
        self.assertTrue(math.isinf(config.churn.s_tmax))

    def test_toy_config_file(self):
        """Test the shipped toy configuration loads"""
        config = load_run_config(Path(settings.BASE_DIR) / 'configs' / 'mathexpr_toy.yaml')
        self.assertEqual(config.backbone.layers, 4)
        self.assertEqual(config.backbone.model_dim, 128)
        self.assertEqual(config.dataset.name, 'mathexpr')
        self.assertEqual(config.training.lr, 2e-4)

    def test_json_config_file(self):
        """Test JSON documents load like YAML ones"""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.json'
            path.write_text(json.dumps({'training': {'epochs': 3}}))
            self.assertEqual(load_run_config(path).training.epochs, 3)

    def test_missing_or_malformed_file(self):
        """Test missing and unparsable files raise ImproperlyConfigured"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ImproperlyConfigured):
                load_run_config(Path(tmp) / 'absent.yaml')
            broken = Path(tmp) / 'broken.yaml'
            broken.write_text('training: [unclosed\n')
            with self.assertRaises(ImproperlyConfigured):
                load_run_config(broken)

    def test_yaml_scientific_notation(self):
        """Test YAML values such as 2e-4 are accepted as numbers"""
        config = parse_run_config(yaml.safe_load('training:\n  lr: 2e-4\n'))
        self.assertEqual(config.training.lr, 2e-4)


class RuntimeSettingsTestCase(SimpleTestCase):
    def test_configure_runtime(self):
        """Test the device and thread settings are applied to torch"""
        threads = torch.get_num_threads()
        try:
            with override_settings(TABDLM_DEVICE='cpu', TABDLM_NUM_THREADS=1):
                self.assertEqual(configure_runtime(), torch.device('cpu'))
                self.assertEqual(torch.get_num_threads(), 1)
        finally:
            torch.set_num_threads(threads)

    def test_only_used_settings(self):
        """Test every TABDLM setting is one the runtime or the test suite reads"""
        names = {name for name in dir(settings) if name.startswith('TABDLM_')}
        self.assertEqual(names, {'TABDLM_DEVICE', 'TABDLM_NUM_THREADS', 'TABDLM_RUN_SLOW'})


class ShardRangesTestCase(SimpleTestCase):
    def test_batch_aligned(self):
        """Test shards cover the range contiguously on batch boundaries"""
        self.assertEqual(shard_ranges(130, 2, 64), [(0, 128), (128, 2)])
        self.assertEqual(shard_ranges(100, 4, 10), [(0, 30), (30, 30), (60, 30), (90, 10)])
        self.assertEqual(shard_ranges(5, 1, 64), [(0, 5)])

    def test_empty(self):
        """Test an empty request is rejected"""
        with self.assertRaises(ValueError):
            shard_ranges(0, 2, 64)


class RunLedgerTestCase(TestCase):
    def test_lifecycle(self):
        """Test a run is recorded as running, then completed"""
        run = RunLedger.start('train', 'abc', 3, {'data': 'ff'})
        self.assertEqual(run.status, 'running')
        RunLedger.complete(run, '/tmp/out', {'step': 4})
        run.refresh_from_db()
        self.assertEqual(run.status, 'completed')
        self.assertEqual(run.summary, {'step': 4})
        self.assertEqual(run.input_hashes, {'data': 'ff'})
        self.assertIsNotNone(run.finished_at)

    def test_failure(self):
        """Test a failed run keeps its error text"""
        run = RunLedger.start('sample')
        RunLedger.fail(run, ValueError('bad checkpoint'))
        run = ExperimentRun.objects.get(pk=run.pk)
        self.assertEqual(run.status, 'failed')
        self.assertEqual(run.error, 'bad checkpoint')

    def test_missing_run(self):
        """Test completing or failing without a ledger entry is a no-op"""
        RunLedger.complete(None, 'x')
        RunLedger.fail(None, 'x')
        self.assertEqual(ExperimentRun.objects.count(), 0)
