"""
選択したスキームで検出器を事前学習するDjango管理コマンド

使用方法:
    python manage.py pretrain --config experiment.json
    python manage.py pretrain --scheme self_train --work-dir work
"""

from experiments.stages import PRETRAIN

from ._base import StageCommand


class Command(StageCommand):
    help = '選択したスキームで検出器を事前学習します'
    stage = PRETRAIN
