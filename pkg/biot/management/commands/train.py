import os

from ._base import ExperimentCommand


class Command(ExperimentCommand):

    help = 'Train the surrogate on the general box or on the posterior approximation'

    def add_arguments(self, parser):
        super(Command, self).add_arguments(parser)
        parser.add_argument('--regime', choices=('general', 'adaptive'),
                            default='general')
        parser.add_argument('--init-weights', dest='init_weights',
                            help='surrogate checkpoint used as initialisation')

    def context(self, options, **kwargs):
        return super(Command, self).context(options,
                                            init_weights=options['init_weights'])

    def run(self, ctx, **options):
        regime = options['regime']
        with ctx.stage('data'):
            ctx.prepare()
        if options['init_weights']:
            # An explicit initialisation replaces any checkpoint in the run.
            ctx.net = ctx.build_net()
        if regime == 'adaptive' and os.path.exists(ctx.path('laplace.npz')):
            ctx.load_laplace()
        with ctx.stage('train_%s' % regime):
            result = ctx.train_surrogate(regime)
        self.stdout.write('Trained for %d steps (%s)' % (result.steps, result.reason))
