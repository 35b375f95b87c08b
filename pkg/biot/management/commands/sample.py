from biot.harness import SCHEMES
from biot.harness import cost_row

from ._base import ExperimentCommand


class Command(ExperimentCommand):

    help = 'Sample the posterior, starting from the Laplace approximation'

    def add_arguments(self, parser):
        super(Command, self).add_arguments(parser)
        parser.add_argument('--scheme', choices=SCHEMES, default=None)
        parser.add_argument('--delayed-acceptance', dest='delayed_acceptance',
                            action='store_true', default=False)
        parser.add_argument('--resume', action='store_true', default=False)

    def run(self, ctx, **options):
        with ctx.stage('data'):
            ctx.prepare()
        with ctx.stage('sample'):
            chain, metadata = ctx.sample(scheme=options['scheme'],
                                         delayed=options['delayed_acceptance'],
                                         resume=options['resume'])
            ctx.summary['sample'] = dict(metadata, **cost_row(chain, metadata))
        self.stdout.write('%d iterations, acceptance %.3f'
                          % (metadata['iterations'],
                             metadata['acceptance']['stage2']))
