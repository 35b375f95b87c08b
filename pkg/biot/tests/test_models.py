from django.core.exceptions import ValidationError
from django.test import TestCase

from biot.models import DatasetRecord
from biot.models import ExperimentRun
from biot.models import validate_digest
from biot.models import validate_seed


DIGEST = 'ab' * 32


class ValidatorTests(TestCase):

    def test_digest(self):
        validate_digest(DIGEST)
        for value in ('', None, DIGEST.upper(), DIGEST[:-1], 'g' * 64):
            with self.assertRaises(ValidationError):
                validate_digest(value)

    def test_seed(self):
        validate_seed('0')
        validate_seed(str(2 ** 64 - 1))
        for value in ('-1', '1.5', str(2 ** 64), ''):
            with self.assertRaises(ValidationError):
                validate_seed(value)


class ExperimentRunTests(TestCase):

    def create(self, **fields):
        values = dict(out_dir='/tmp/run', config_hash=DIGEST, seed='7', command='map')
        values.update(fields)
        return ExperimentRun.objects.create(**values)

    def test_defaults(self):
        run = self.create()
        self.assertEqual(run.status, 'Running')
        self.assertEqual(run.stage, '')
        self.assertEqual(run.summary, {})
        self.assertEqual(str(run), 'Run map of abababababab (Running)')

    def test_mark_completed(self):
        run = self.create()
        run.mark_completed({'map': {'sigma': 0.5}})
        run.refresh_from_db()
        self.assertEqual(run.status, 'Completed')
        self.assertEqual(run.summary['map']['sigma'], 0.5)

    def test_mark_failed(self):
        run = self.create(command='run')
        run.mark_failed('sample')
        run.refresh_from_db()
        self.assertEqual(run.status, 'Failed')
        self.assertEqual(run.stage, 'sample')

    def test_invalid_values_are_rejected(self):
        with self.assertRaises(ValidationError):
            self.create(config_hash='not-a-digest')
        with self.assertRaises(ValidationError):
            self.create(seed='-3')
        self.assertFalse(ExperimentRun.objects.exists())

    def test_large_seed(self):
        run = self.create(seed=str(2 ** 64 - 1))
        run.refresh_from_db()
        self.assertEqual(int(run.seed), 2 ** 64 - 1)

    def test_dataset_record(self):
        run = self.create()
        record = DatasetRecord.objects.create(run=run, source='Simulated', sha256=DIGEST,
                                              records=152)
        self.assertEqual(str(record), 'Simulated dataset abababababab (152 records)')
        with self.assertRaises(ValidationError):
            DatasetRecord.objects.create(run=run, source='Upload', sha256=DIGEST,
                                         records=1)
        run.delete()
        self.assertFalse(DatasetRecord.objects.exists())
