"""
事前学習コーパスに一回限りの疑似ラベル（または提案ボックス）を付けるDjango管理コマンド

使用方法:
    python manage.py pseudo_label --config experiment.json
    python manage.py pseudo_label --scheme detreg --pseudo-count 25

教師の予測（detreg 以外）または選択的探索（detreg）から作る。既にあれば作り直さない。
"""

from experiments.stages import PSEUDO_LABEL

from ._base import StageCommand


class Command(StageCommand):
    help = '事前学習コーパスに一回限りの疑似ラベル（または提案ボックス）を付けます'
    stage = PSEUDO_LABEL
