from dataclasses import asdict
import tempfile
from io import StringIO
from pathlib import Path
from unittest import skipUnless

import torch
import yaml
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, tag

from metrics.match_rates import op_match_rate
from mdlm.layout import SerializationError
from metrics.services import evaluate
from tabular.schema import Table
from tabular.services import read_json, read_table, sidecar_path, write_json, write_table

from .checkpoints import CheckpointMismatchError, load_checkpoint
from .config import parse_run_config
from .models import ExperimentRun
from .services import (
    generate_dataset, merge_shards, prepare_training, run_training, sample_shard_payload,
    sampler_settings,
)
from .tasks import sample_in_shards

TINY_CONFIG = {
    'dataset': {'name': 'mathexpr'},
    'backbone': {'layers': 1, 'model_dim': 16, 'heads': 2, 'ff_dim': 32, 'max_len': 256},
    'codec': {'latent_dim': 4, 'epochs': 20, 'polish_steps': 0, 'strict': False},
    'training': {'epochs': 1, 'batch_size': 16, 'seed': 0},
    'sampler': {'steps': 3, 'batch_size': 8, 'seed': 1},
}


def run(command, **options):
    out = StringIO()
    call_command(command, stdout=out, **options)
    return out.getvalue()


class GenDataCommandTestCase(TestCase):
    def test_writes_table_and_sidecars(self):
        """Test gen_data writes the CSV with schema and manifest sidecars"""
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / 'mathexpr.csv'
            run('gen_data', dataset='mathexpr', n=50, seed=3, out=str(out))
            table = read_table(out)
            self.assertEqual(len(table), 50)
            self.assertEqual(len(table.schema.columns), 6)
            manifest = read_json(sidecar_path(out, 'manifest'))
            self.assertEqual((manifest['n'], manifest['seed']), (50, 3))
            self.assertIn('generator_version', manifest)
        self.assertEqual(ExperimentRun.objects.get().status, 'completed')

    def test_deterministic_bytes(self):
        """Test the same arguments produce identical files"""
        with tempfile.TemporaryDirectory() as tmp:
            first, second = Path(tmp) / 'a.csv', Path(tmp) / 'b.csv'
            run('gen_data', dataset='profilebio', n=40, seed=9, out=str(first))
            run('gen_data', dataset='profilebio', n=40, seed=9, out=str(second))
            self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_splits(self):
        """Test a train fraction also writes disjoint train and validation files"""
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / 'mathexpr.csv'
            run('gen_data', dataset='mathexpr', n=100, seed=0, out=str(out), train_fraction=0.9)
            self.assertEqual(len(read_table(Path(tmp) / 'mathexpr.train.csv')), 90)
            self.assertEqual(len(read_table(Path(tmp) / 'mathexpr.val.csv')), 10)

    def test_errors(self):
        """Test n=0 and unknown datasets fail and are recorded as failed"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError):
                run('gen_data', dataset='mathexpr', n=0, seed=0, out=str(Path(tmp) / 'x.csv'))
            with self.assertRaises(CommandError):
                run('gen_data', dataset='census', n=10, seed=0, out=str(Path(tmp) / 'y.csv'))
        self.assertEqual(ExperimentRun.objects.filter(status='failed').count(), 2)


class EvalCommandTestCase(TestCase):
    def test_self_comparison(self):
        """Test evaluating a table against itself reports zero Shape and Trend"""
        with tempfile.TemporaryDirectory() as tmp:
            data = Path(tmp) / 'mathexpr.csv'
            report = Path(tmp) / 'report.txt'
            generate_dataset('mathexpr', 300, 0, data)
            output = run('eval', real=str(data), synth=str(data), report=str(report))
            self.assertIn('Shape error    0.00%', output)
            self.assertIn('Trend error    0.00%', output)
            payload = read_json(report.with_suffix('.json'))
            self.assertEqual(payload['shape'], 0.0)
            self.assertEqual(payload['match_rates']['Op-MR'], 1.0)

    def test_no_valid_synthetic_records(self):
        """Test an all-invalid sample still writes a report with the invalid count"""
        with tempfile.TemporaryDirectory() as tmp:
            data = Path(tmp) / 'mathexpr.csv'
            synth = Path(tmp) / 'synth.csv'
            report = Path(tmp) / 'report.txt'
            generate_dataset('mathexpr', 40, 0, data)
            real = read_table(data)
            write_table(Table(real.schema, real.frame.iloc[:0]), synth)
            write_json(sidecar_path(synth, 'manifest'), {'command': 'sample', 'invalid_records': 7})
            output = run('eval', real=str(data), synth=str(synth), report=str(report))
            self.assertIn('Invalid records  7', output)
            payload = read_json(report.with_suffix('.json'))
            self.assertEqual(payload['n_synth'], 0)
            self.assertEqual(payload['invalid_records'], 7)
            self.assertIsNone(payload['shape'])
            run_entry = ExperimentRun.objects.get(command='eval')
            self.assertEqual(run_entry.status, 'completed')
            self.assertEqual(run_entry.summary['invalid_records'], 7)

    def test_schema_mismatch(self):
        """Test tables of different datasets cannot be compared"""
        with tempfile.TemporaryDirectory() as tmp:
            generate_dataset('mathexpr', 20, 0, Path(tmp) / 'a.csv')
            generate_dataset('profilebio', 20, 0, Path(tmp) / 'b.csv')
            with self.assertRaises(CommandError):
                run('eval', real=str(Path(tmp) / 'a.csv'), synth=str(Path(tmp) / 'b.csv'))


class PipelineTestCase(TestCase):
    """gen_data -> pretrain_codec -> train -> sample -> eval on a tiny model."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.data = self.root / 'mathexpr.csv'
        self.config = self.root / 'tiny.yaml'
        self.config.write_text(yaml.safe_dump(TINY_CONFIG))
        self.codec = self.root / 'codec.pt'
        run('gen_data', dataset='mathexpr', n=64, seed=0, out=str(self.data))
        run('pretrain_codec', config=str(self.config), out=str(self.codec))

    def tearDown(self):
        self.tmp.cleanup()

    def train(self, out, **options):
        return run('train', config=str(self.config), data=str(self.data), codec=str(self.codec),
                   out=str(out), **options)

    def test_codec_artifacts(self):
        """Test the codec file comes with its statistics sidecar"""
        info = read_json(self.codec.with_suffix('.json'))
        self.assertEqual(info['latent_dim'], 4)
        self.assertIn('mean_error', info['roundtrip'])
        self.assertEqual(info['config_hash'], parse_run_config(TINY_CONFIG).config_hash)

    def test_full_pipeline(self):
        """Test every stage runs and writes traceable artifacts"""
        ckpt = self.root / 'ckpt'
        self.train(ckpt)
        for name in ('model.pt', 'metadata.json', 'vocabulary.json', 'layout.json',
                     'schema.json', 'normalizers.json'):
            self.assertTrue((ckpt / name).exists(), name)
        metadata = read_json(ckpt / 'metadata.json')
        self.assertEqual(metadata['step'], 4)
        self.assertEqual(metadata['config_hash'], parse_run_config(TINY_CONFIG).config_hash)
        self.assertIn('data', metadata['input_hashes'])
        self.assertEqual(len((ckpt / 'train_log.jsonl').read_text().splitlines()), 4)

        synth = self.root / 'synth.csv'
        run('sample', ckpt=str(ckpt), n=10, steps=3, policy='random', seed=1, out=str(synth))
        manifest = read_json(sidecar_path(synth, 'manifest'))
        self.assertEqual(manifest['config_hash'], metadata['config_hash'])
        self.assertEqual(manifest['n_valid'] + manifest['invalid_records'], 10)
        self.assertEqual(manifest['sampler']['policy'], 'random')

        if manifest['n_valid']:
            report = self.root / 'report.json'
            run('eval', real=str(self.data), synth=str(synth), report=str(report), json=True)
            payload = read_json(report)
            self.assertEqual(payload['invalid_records'], manifest['invalid_records'])
        self.assertFalse(ExperimentRun.objects.exclude(status='completed').exists())

    def test_sampling_is_reproducible(self):
        """Test sampling twice with the same seed writes identical CSVs"""
        ckpt = self.root / 'ckpt'
        self.train(ckpt)
        first, second = self.root / 'one.csv', self.root / 'two.csv'
        run('sample', ckpt=str(ckpt), n=12, seed=1, out=str(first))
        run('sample', ckpt=str(ckpt), n=12, seed=1, out=str(second))
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_shards_match_single_run(self):
        """Test in-process sampling matches batch-aligned shards sampled separately"""
        ckpt = self.root / 'ckpt'
        self.train(ckpt)
        bundle = load_checkpoint(ckpt)
        settings_used = sampler_settings(bundle)
        whole = sample_in_shards(bundle, settings_used, 16)
        payloads = [sample_shard_payload(ckpt, asdict(settings_used), start, 8) for start in (8, 0)]
        merged = merge_shards(payloads, len(bundle.layout.numeric_names))
        self.assertTrue(torch.equal(whole.tokens, merged.tokens))
        self.assertTrue(torch.equal(whole.numbers, merged.numbers))

    def test_resume_equivalence(self):
        """Test one step plus a resumed step equals two uninterrupted steps"""
        interrupted, straight = self.root / 'interrupted', self.root / 'straight'
        self.train(interrupted, max_steps=1)
        self.assertEqual(read_json(interrupted / 'metadata.json')['step'], 1)
        self.train(interrupted, max_steps=2, resume=True)
        self.train(straight, max_steps=2)
        resumed = torch.load(interrupted / 'model.pt', weights_only=True)['model']
        uninterrupted = torch.load(straight / 'model.pt', weights_only=True)['model']
        self.assertEqual(resumed.keys(), uninterrupted.keys())
        for name in resumed:
            self.assertTrue(torch.equal(resumed[name], uninterrupted[name]), name)

    def test_resume_refuses_other_schema(self):
        """Test resuming on data with a different schema is refused"""
        ckpt = self.root / 'ckpt'
        self.train(ckpt, max_steps=1)
        other = self.root / 'profilebio.csv'
        generate_dataset('profilebio', 32, 0, other)
        with self.assertRaises(CheckpointMismatchError):
            prepare_training(parse_run_config(TINY_CONFIG), other, ckpt, codec_path=self.codec, resume=True)
        with self.assertRaises(CommandError):
            run('train', config=str(self.config), data=str(other), out=str(ckpt), resume=True)

    def test_resume_refuses_other_vocabulary(self):
        """Test resuming on same-schema data with unseen text pieces is refused"""
        ckpt = self.root / 'ckpt'
        self.train(ckpt, max_steps=1)
        table = read_table(self.data)
        table.frame.loc[0, 'latex'] = r'\alpha(1.00) + 2.00'
        other = self.root / 'mathexpr_other.csv'
        write_table(table, other)
        with self.assertRaises(CheckpointMismatchError):
            prepare_training(parse_run_config(TINY_CONFIG), other, ckpt, codec_path=self.codec, resume=True)
        with self.assertRaises(CommandError):
            run('train', config=str(self.config), data=str(other), out=str(ckpt), resume=True)
        self.assertEqual(read_json(ckpt / 'metadata.json')['step'], 1)

    def test_resume_on_same_vocabulary(self):
        """Test resuming on a reshuffled copy of the data is allowed"""
        ckpt = self.root / 'ckpt'
        self.train(ckpt, max_steps=1)
        table = read_table(self.data)
        shuffled = self.root / 'mathexpr_shuffled.csv'
        write_table(Table(table.schema, table.frame.iloc[::-1]), shuffled)
        with self.assertLogs('experiments.services', level='WARNING'):
            training = prepare_training(
                parse_run_config(TINY_CONFIG), shuffled, ckpt, codec_path=self.codec, resume=True,
            )
        self.assertEqual(training.trainer.step, 1)

    def test_validation_truncation_policy(self):
        """Test overlong validation text is truncated by default and refused under 'fail'"""
        table = read_table(self.data)
        table.frame.loc[0, 'latex'] = table.frame.loc[0, 'latex'] * 30
        validation = self.root / 'mathexpr_long.csv'
        write_table(table, validation)
        training = prepare_training(
            parse_run_config(TINY_CONFIG), self.data, self.root / 'truncated',
            codec_path=self.codec, validation=validation,
        )
        self.assertIsNotNone(training.trainer.validation)
        strict = {**TINY_CONFIG, 'dataset': {'name': 'mathexpr', 'validation_truncation': 'fail'}}
        with self.assertRaises(SerializationError):
            prepare_training(
                parse_run_config(strict), self.data, self.root / 'strict',
                codec_path=self.codec, validation=validation,
            )

    def test_training_truncation_policy(self):
        """Test resuming on training text longer than the checkpoint layout is refused"""
        ckpt = self.root / 'ckpt'
        self.train(ckpt, max_steps=1)
        table = read_table(self.data)
        table.frame.loc[0, 'latex'] = table.frame.loc[0, 'latex'] * 30
        longer = self.root / 'mathexpr_long.csv'
        write_table(table, longer)
        with self.assertRaises(SerializationError):
            prepare_training(parse_run_config(TINY_CONFIG), longer, ckpt, codec_path=self.codec, resume=True)

    def test_unsupported_checkpoint_format(self):
        """Test a checkpoint with an unknown format version is refused"""
        ckpt = self.root / 'ckpt'
        self.train(ckpt, max_steps=1)
        metadata = read_json(ckpt / 'metadata.json')
        metadata['format_version'] = 99
        write_json(ckpt / 'metadata.json', metadata)
        with self.assertRaises(CheckpointMismatchError):
            load_checkpoint(ckpt)
        with self.assertRaises(CommandError):
            run('sample', ckpt=str(ckpt), n=4, seed=0, out=str(self.root / 'x.csv'))


@tag('slow')
@skipUnless(settings.TABDLM_RUN_SLOW, 'set TABDLM_RUN_SLOW=1 to run the toy experiment')
class ToyExperimentTestCase(TestCase):
    """Reference toy model on 4500 MathExpr rows, both unmasking policies."""

    def test_toy_mathexpr(self):
        """Test the toy run reaches the fidelity thresholds and reproduces exactly"""
        config = parse_run_config(yaml.safe_load(
            (Path(settings.BASE_DIR) / 'configs' / 'mathexpr_toy.yaml').read_text()
        ) | {'dataset': {'name': 'mathexpr'}})
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            generate_dataset('mathexpr', 5000, 0, root / 'mathexpr.csv', train_fraction=0.9)
            train_csv = root / 'mathexpr.train.csv'
            training, _ = run_training(config, train_csv, root / 'ckpt')
            bundle = load_checkpoint(root / 'ckpt')
            real = read_table(train_csv)

            rates = {}
            for policy in ('confidence', 'random'):
                out = root / f'{policy}.csv'
                run('sample', ckpt=str(root / 'ckpt'), n=2000, steps=50, policy=policy, seed=1, out=str(out))
                synth = read_table(out)
                report = evaluate(real, synth)
                self.assertLessEqual(report.shape, 0.10, policy)
                self.assertLessEqual(report.trend, 0.15, policy)
                rates[policy] = op_match_rate(synth)
                self.assertGreaterEqual(rates[policy], 0.75, policy)
            self.assertGreaterEqual(rates['confidence'], rates['random'] - 0.05)

            again = root / 'again.csv'
            run('sample', ckpt=str(root / 'ckpt'), n=2000, steps=50, policy='confidence', seed=1, out=str(again))
            self.assertEqual(again.read_bytes(), (root / 'confidence.csv').read_bytes())
            self.assertEqual(bundle.step, training.trainer.total_steps)
