"""
ファインチューニング済みモデルを下流評価データで評価するDjango管理コマンド

使用方法:
    python manage.py evaluate --config experiment.json
    python manage.py evaluate --scheme detreg --work-dir work

結果は <work>/evaluate/<キー>/metrics.json と metrics.txt に書き出す。
"""

from experiments.stages import EVALUATE

from ._base import StageCommand


class Command(StageCommand):
    help = 'ファインチューニング済みモデルを下流評価データで評価します'
    stage = EVALUATE
