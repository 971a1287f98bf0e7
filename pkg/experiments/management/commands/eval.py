import logging

from django.core.management.base import BaseCommand, CommandError

from experiments.services import EXPERIMENT_ERRORS, RunLedger, evaluate_files, percent_summary

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Compute Shape, Trend and match rates of a synthetic table against real data'

    def add_arguments(self, parser):
        parser.add_argument('--real', required=True)
        parser.add_argument('--synth', required=True)
        parser.add_argument('--schema', default=None, help='Schema JSON (defaults to the CSV sidecars)')
        parser.add_argument('--report', default=None, help='Report path (text, plus a .json twin)')
        parser.add_argument('--json', action='store_true', help='Write the report as JSON only')

    def handle(self, *args, **options):
        run = RunLedger.start('eval')
        try:
            report, input_hashes = evaluate_files(
                options['real'], options['synth'], options['schema'], options['report'],
                as_json=options['json'],
            )
        except EXPERIMENT_ERRORS as exc:
            logger.error(f"eval failed: {exc}")
            RunLedger.fail(run, exc)
            raise CommandError(str(exc)) from exc

        RunLedger.complete(run, options['report'] or '', percent_summary(report), input_hashes)
        self.stdout.write(report.render())
