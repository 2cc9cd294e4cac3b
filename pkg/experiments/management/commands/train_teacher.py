"""
教師モデルを下流学習データで学習するDjango管理コマンド

使用方法:
    python manage.py train_teacher --config experiment.json
    python manage.py train_teacher --scheme self_train --work-dir work
"""

from experiments.stages import TRAIN_TEACHER

from ._base import StageCommand


class Command(StageCommand):
    help = '教師モデルを下流学習データで学習します'
    stage = TRAIN_TEACHER
