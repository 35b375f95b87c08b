from django.core.exceptions import ImproperlyConfigured

from ._base import ExperimentCommand


class Command(ExperimentCommand):

    help = 'Simulate a dataset from a GP-drawn Biot number into the run directory'

    def run(self, ctx, **options):
        if ctx.config['data']['source'] != 'simulate':
            raise ImproperlyConfigured('data.source must be "simulate" to simulate')
        with ctx.stage('data'):
            ctx.prepare()
        self.stdout.write('%d records in %s' % (len(ctx.dataset), ctx.path('data.csv')))
