import logging

from django.core.management.base import BaseCommand, CommandError

from experiments.services import EXPERIMENT_ERRORS, RunLedger, generate_dataset

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Generate a synthetic MathExpr or ProfileBio table with schema and manifest sidecars'

    def add_arguments(self, parser):
        parser.add_argument('--dataset', required=True, help='mathexpr or profilebio')
        parser.add_argument('--n', type=int, default=5000, help='Number of rows')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--out', required=True, help='Output CSV path')
        parser.add_argument('--train-fraction', type=float, default=None,
                            help='Also write <stem>.train.csv / <stem>.val.csv with this train share')

    def handle(self, *args, **options):
        run = RunLedger.start('gen_data', seed=options['seed'])
        try:
            table, manifest = generate_dataset(
                options['dataset'], options['n'], options['seed'], options['out'],
                train_fraction=options['train_fraction'],
            )
        except EXPERIMENT_ERRORS as exc:
            logger.error(f"gen_data failed: {exc}")
            RunLedger.fail(run, exc)
            raise CommandError(str(exc)) from exc

        RunLedger.complete(run, options['out'], {'rows': len(table)}, {'output': manifest['sha256']})
        self.stdout.write(
            self.style.SUCCESS(f"Wrote {len(table)} {options['dataset']} rows to {options['out']}")
        )
