import re

from django.db import models
from django.core.exceptions import ValidationError


HEX_DIGEST = re.compile(r'^[0-9a-f]{64}$')


def validate_digest(value):
    """Validate a SHA-256 hex digest (config hashes, dataset hashes)."""
    if not HEX_DIGEST.match(value or ''):
        raise ValidationError('Invalid SHA-256 digest')


def validate_seed(value):
    """Validate a seed stored as the decimal text of an unsigned 64-bit int."""
    if not value.isdigit() or int(value) >= 2 ** 64:
        raise ValidationError('Invalid seed %r' % value)


class ExperimentRun(models.Model):
    """Bookkeeping entry for one CLI invocation on a run directory.

    The run directory stays the artifact of record; this row only tracks
    where it lives, which configuration produced it and how far it got.

    """

    out_dir = models.CharField(max_length=512)
    config_hash = models.CharField(max_length=64, validators=[validate_digest])

    # Unsigned 64-bit seeds do not fit a signed integer column.
    seed = models.CharField(max_length=20, validators=[validate_seed])
    command = models.CharField(max_length=16)
    status = models.CharField(max_length=12,
                              default='Running',
                              choices=(('Running', 'Running'),
                                       ('Completed', 'Completed'),
                                       ('Failed', 'Failed')))
    stage = models.CharField(max_length=32, blank=True)
    created = models.DateTimeField(auto_now_add=True)
    summary = models.JSONField(default=dict, blank=True)

    def mark_completed(self, summary=None):
        self.status = 'Completed'
        self.summary = summary or {}
        self.save()

    def mark_failed(self, stage, summary=None):
        """Record the stage that failed alongside the partial summary."""
        self.status = 'Failed'
        self.stage = stage
        self.summary = summary or {}
        self.save()

    def save(self, *args, **kwargs):
        """Perform full validation and save."""
        self.full_clean()
        super(ExperimentRun, self).save(*args, **kwargs)

    def __str__(self):
        return 'Run %s of %s (%s)' % (self.command, self.config_hash[:12],
                                      self.status)


class DatasetRecord(models.Model):
    """The dataset a run was fitted to, identified by its file hash."""

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE)

    source = models.CharField(max_length=12,
                              choices=(('Simulated', 'Simulated'),
                                       ('File', 'File')))
    sha256 = models.CharField(max_length=64, validators=[validate_digest])
    records = models.PositiveIntegerField()

    def save(self, *args, **kwargs):
        """Perform full validation and save."""
        self.full_clean()
        super(DatasetRecord, self).save(*args, **kwargs)

    def __str__(self):
        return '%s dataset %s (%d records)' % (self.source, self.sha256[:12],
                                               self.records)
