from django.apps import AppConfig


class BoxopsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'boxops'
