"""
データセット（事前学習コーパス・下流学習・下流評価）を生成するDjango管理コマンド

使用方法:
    python manage.py gen_data --config experiment.json
    python manage.py gen_data --pretrain-images 200 --data-seed 7
"""

from experiments.stages import GEN_DATA

from ._base import StageCommand


class Command(StageCommand):
    help = 'データセット（事前学習コーパス・下流学習・下流評価）を生成します'
    stage = GEN_DATA
