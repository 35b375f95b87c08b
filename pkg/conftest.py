"""Run the Django test suite under pytest, as `./manage.py test` would."""

import os

import django
import pytest

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'project.settings')
django.setup()

from django.conf import settings  # noqa: E402
from django.test.utils import setup_databases  # noqa: E402
from django.test.utils import setup_test_environment  # noqa: E402
from django.test.utils import teardown_databases  # noqa: E402
from django.test.utils import teardown_test_environment  # noqa: E402


def _tags(item):
    tags = set(getattr(getattr(item, 'cls', None), 'tags', ()) or ())
    tags |= set(getattr(getattr(item, 'function', None), 'tags', ()) or ())
    return tags


def pytest_collection_modifyitems(config, items):
    # Same gating as project.runner.BiotTestRunner.
    excluded = set()
    if not settings.BIOT_SLOW_TESTS:
        excluded.add('slow')
    if not settings.BIOT_STUDY_TESTS:
        excluded.add('study')
    for item in items:
        hit = _tags(item) & excluded
        if hit:
            item.add_marker(pytest.mark.skip(
                reason='tagged %s' % ', '.join(sorted(hit))))


@pytest.fixture(scope='session', autouse=True)
def django_test_environment():
    setup_test_environment()
    old_config = setup_databases(verbosity=0, interactive=False)
    yield
    teardown_databases(old_config, verbosity=0)
    teardown_test_environment()
