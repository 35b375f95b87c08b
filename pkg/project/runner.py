from django.conf import settings
from django.test.runner import DiscoverRunner


class BiotTestRunner(DiscoverRunner):
    """Test runner skipping tests tagged `slow` or `study` unless enabled.

    BIOT_SLOW_TESTS turns on the minute-scale pipeline checks and
    BIOT_STUDY_TESTS the full-size simulation study.

    """

    def __init__(self, *args, **kwargs):
        super(BiotTestRunner, self).__init__(*args, **kwargs)
        excluded = set(self.exclude_tags or ())
        if not settings.BIOT_SLOW_TESTS:
            excluded.add('slow')
        if not settings.BIOT_STUDY_TESTS:
            excluded.add('study')
        self.exclude_tags = excluded
