"""Shared plumbing of the experiment commands."""

import logging
import os

from django.conf import settings
from django.core.exceptions import ImproperlyConfigured
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand
from django.core.management.base import CommandError

from biot.exceptions import BiotError
from biot.harness import ExperimentConfig
from biot.harness import RunContext
from biot.harness import json_tree
from biot.harness import open_record


log = logging.getLogger(__name__)


class ExperimentCommand(BaseCommand):
    """Base class of the commands operating on a run directory.

    Subclasses implement `run(ctx, **options)`. Library, validation and
    configuration errors are reported as `CommandError`, so the process
    exits with a nonzero status.

    """

    # Whether `handle` keeps an `ExperimentRun` row for the invocation.
    record = True

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON experiment file')
        parser.add_argument('--preset', help='named preset from BIOT_PRESETS')
        parser.add_argument('--seed', type=int, help='unsigned 64-bit seed')
        parser.add_argument('--out', help='run directory')

    def load_config(self, options):
        return ExperimentConfig.load(options['config'], options['preset'],
                                     seed=options['seed'])

    def out_dir(self, config, options):
        return options['out'] or os.path.join(settings.BIOT_OUTPUT_DIR,
                                              config.hash[:12])

    def context(self, options, **kwargs):
        config = self.load_config(options)
        return RunContext(config, self.out_dir(config, options), **kwargs)

    def handle(self, *args, **options):
        try:
            return self.execute_command(options)
        except (BiotError, ValidationError, ImproperlyConfigured) as exc:
            raise CommandError(str(exc))

    def execute_command(self, options):
        ctx = self.context(options)
        record = open_record(ctx, self.name) if self.record else None
        try:
            ctx.write_config()
            self.run(ctx, **options)
        except Exception as exc:
            if record is not None:
                record.mark_failed(getattr(exc, 'stage', self.name),
                                   json_tree(ctx.summary))
            raise
        ctx.summary['status'] = 'completed'
        ctx.write_summary()
        if record is not None:
            if ctx.dataset is not None:
                ctx.record_dataset(record)
            record.mark_completed(json_tree(ctx.summary))
        self.stdout.write('%s completed in %s' % (self.name, ctx.out_dir))

    @property
    def name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def run(self, ctx, **options):
        raise NotImplementedError()
