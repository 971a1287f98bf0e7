import logging

from django.core.management.base import BaseCommand, CommandError

from experiments.config import load_run_config
from experiments.services import EXPERIMENT_ERRORS, RunLedger, configure_runtime, run_training

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Train the joint denoiser on a table and write a checkpoint bundle'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='YAML or JSON run configuration')
        parser.add_argument('--data', required=True, help='Training CSV with a schema sidecar')
        parser.add_argument('--out', required=True, help='Checkpoint directory')
        parser.add_argument('--codec', default=None, help='Pretrained codec (pretrained inline if omitted)')
        parser.add_argument('--resume', action='store_true', help='Continue from the bundle in --out')
        parser.add_argument('--max-steps', type=int, default=None, help='Stop after this many total steps')
        parser.add_argument('--validation', default=None, help='Held-out CSV for per-epoch validation loss')

    def handle(self, *args, **options):
        try:
            config = load_run_config(options['config'])
        except EXPERIMENT_ERRORS as exc:
            raise CommandError(str(exc)) from exc

        run = RunLedger.start('train', config.config_hash, config.training.seed)
        try:
            training, report = run_training(
                config, options['data'], options['out'],
                codec_path=options['codec'],
                resume=options['resume'],
                max_steps=options['max_steps'],
                validation=options['validation'],
                device=configure_runtime(),
            )
        except EXPERIMENT_ERRORS as exc:
            logger.error(f"train failed: {exc}")
            RunLedger.fail(run, exc)
            raise CommandError(str(exc)) from exc

        trainer = training.trainer
        summary = {'step': trainer.step, 'total_steps': trainer.total_steps}
        if report is not None:
            summary.update(report.to_dict())
        RunLedger.complete(run, options['out'], summary, training.input_hashes)
        self.stdout.write(self.style.SUCCESS(
            f"Trained to step {trainer.step}/{trainer.total_steps}; checkpoint in {options['out']}"
        ))
