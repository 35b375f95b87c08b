from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand
from django.core.management.base import CommandError

from biot.exceptions import BiotError
from biot.harness import diagnose_run
from biot.harness import diagnose_runs
from biot.harness import load_run_config


class Command(BaseCommand):

    help = 'Compute ESS, profiles, accuracy and cost tables for run directories'

    def add_arguments(self, parser):
        parser.add_argument('runs', nargs='+', help='run directories')
        parser.add_argument('--out', help='directory of the combined cost table')

    def handle(self, *args, **options):
        try:
            hashes = {load_run_config(path).hash for path in options['runs']}
            if len(hashes) > 1:
                raise ValidationError('Refusing to combine runs with different '
                                      'config hashes: %s' % ', '.join(sorted(hashes)))
            for path in options['runs']:
                ctx = diagnose_run(path)
                found = ctx.summary['diagnostics']
                self.stdout.write('%s: min ESS %.1f, L1 error %.3g'
                                  % (path, found['min_ess'], found['l1_error']))
            if len(options['runs']) > 1 or options['out']:
                table = diagnose_runs(options['runs'], options['out'])
                self.stdout.write(table.to_string(index=False))
        except (BiotError, ValidationError) as exc:
            raise CommandError(str(exc))
