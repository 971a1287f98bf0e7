import logging

from django.core.management.base import BaseCommand, CommandError

from experiments.config import load_run_config
from experiments.services import EXPERIMENT_ERRORS, RunLedger, pretrain_and_save_codec

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Pretrain and freeze the scalar float codec'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='YAML or JSON run configuration')
        parser.add_argument('--out', required=True, help='Codec file (or directory for codec.pt)')

    def handle(self, *args, **options):
        try:
            config = load_run_config(options['config'])
        except EXPERIMENT_ERRORS as exc:
            raise CommandError(str(exc)) from exc

        run = RunLedger.start('pretrain_codec', config.config_hash, config.codec.seed)
        try:
            codec, stats, path = pretrain_and_save_codec(config, options['out'])
        except EXPERIMENT_ERRORS as exc:
            logger.error(f"pretrain_codec failed: {exc}")
            RunLedger.fail(run, exc)
            raise CommandError(str(exc)) from exc

        RunLedger.complete(run, path, stats.to_dict())
        style = self.style.SUCCESS if stats.within() else self.style.WARNING
        self.stdout.write(style(
            f"Codec r={codec.latent_dim}: mean error {stats.mean_error:.2e}, "
            f"max error {stats.max_error:.2e} -> {path}"
        ))
