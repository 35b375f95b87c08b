from django.apps import AppConfig


class BiotConfig(AppConfig):
    name = 'biot'
    default_auto_field = 'django.db.models.BigAutoField'
