from biot.harness import replicate
from biot.harness import run

from ._base import ExperimentCommand


class Command(ExperimentCommand):

    help = 'Run the full pipeline: data, MAP, Laplace, training, sampling, diagnostics'

    # The pipeline keeps its own run records.
    record = False

    def add_arguments(self, parser):
        super(Command, self).add_arguments(parser)
        parser.add_argument('--replicates', type=int, default=1,
                            help='number of independently simulated datasets')

    def execute_command(self, options):
        config = self.load_config(options)
        out_dir = self.out_dir(config, options)
        if options['replicates'] > 1:
            table = replicate(config, options['replicates'], out_dir)
            self.stdout.write(table.to_string(index=False))
        else:
            ctx = run(config, out_dir)
            self.stdout.write('Run completed in %s' % ctx.out_dir)
