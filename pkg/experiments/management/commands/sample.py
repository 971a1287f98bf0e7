import logging

from django.core.management.base import BaseCommand, CommandError

from experiments.checkpoints import load_checkpoint
from experiments.services import EXPERIMENT_ERRORS, RunLedger, sampler_settings, write_samples
from experiments.tasks import sample_in_shards

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Sample a synthetic table from a checkpoint bundle'

    def add_arguments(self, parser):
        parser.add_argument('--ckpt', required=True, help='Checkpoint directory')
        parser.add_argument('--n', type=int, required=True, help='Number of records')
        parser.add_argument('--steps', type=int, default=None, help='Reverse steps T')
        parser.add_argument('--policy', default=None, help='confidence or random')
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--out', required=True, help='Output CSV path')
        parser.add_argument('--temperature', type=float, default=None)
        parser.add_argument('--churn', type=float, default=None, help='EDM S_churn')
        parser.add_argument('--batch-size', type=int, default=None)
        parser.add_argument('--workers', type=int, default=1)

    def handle(self, *args, **options):
        run = None
        try:
            bundle = load_checkpoint(options['ckpt'])
            settings_used = sampler_settings(
                bundle,
                steps=options['steps'],
                policy=options['policy'],
                seed=options['seed'],
                temperature=options['temperature'],
                s_churn=options['churn'],
                batch_size=options['batch_size'],
            )
            sampler = settings_used.sampler_config()
            run = RunLedger.start('sample', bundle.config_hash, sampler.seed)
            result = sample_in_shards(bundle, settings_used, options['n'], options['workers'])
            table, invalid, manifest = write_samples(bundle, result, options['out'], settings_used, options['n'])
        except EXPERIMENT_ERRORS as exc:
            logger.error(f"sample failed: {exc}")
            RunLedger.fail(run, exc)
            raise CommandError(str(exc)) from exc

        RunLedger.complete(
            run, options['out'], {'rows': len(table), 'invalid_records': invalid},
            manifest['input_hashes'],
        )
        message = f"Sampled {len(table)} valid records to {options['out']}"
        if invalid:
            self.stdout.write(self.style.WARNING(f"{message} ({invalid} invalid records dropped)"))
        else:
            self.stdout.write(self.style.SUCCESS(message))
