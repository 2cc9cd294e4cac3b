"""
事前学習の重みを読み込んで下流データでファインチューニングするDjango管理コマンド

使用方法:
    python manage.py finetune --config experiment.json
    python manage.py finetune --scheme self_train --components encoder --fraction 0.1
    python manage.py finetune --scheme from_scratch --eval-every 5
"""

from experiments.stages import FINETUNE

from ._base import StageCommand


class Command(StageCommand):
    help = '事前学習の重みを読み込んで下流データでファインチューニングします'
    stage = FINETUNE
