from django.apps import AppConfig


class DetlabConfig(AppConfig):
    name = 'detlab'
    verbose_name = 'DETR pre-training laboratory'
