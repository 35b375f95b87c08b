from ._base import ExperimentCommand


class Command(ExperimentCommand):

    help = 'Find the MAP estimate and fit the Laplace approximation around it'

    def run(self, ctx, **options):
        with ctx.stage('data'):
            ctx.prepare()
        with ctx.stage('map'):
            result = ctx.estimate_map()
        self.stdout.write('MAP sigma %.6g after %d iterations (%s)'
                          % (result.sigma, result.iterations, result.reason))
