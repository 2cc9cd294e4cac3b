"""ラボ共通の例外クラス。

各例外は最も近い組み込み例外も継承しているので、呼び出し側は
ValueError などでも捕捉できる。
"""


class DetlabError(Exception):
    """ラボ内で発生するエラーの基底クラス"""


class NonFiniteError(DetlabError, FloatingPointError):
    """NaN/Inf を検出した（グラフノードまたは学習ロス）"""

    def __init__(self, message: str, *, node_id: int | None = None, op: str | None = None,
                 epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.node_id = node_id
        self.op = op
        self.epoch = epoch
        self.step = step


class ShapeMismatchError(DetlabError, ValueError):
    """テンソル形状の不一致"""


class NondeterminismError(DetlabError, RuntimeError):
    """同じ入力で評価結果が変わった"""


class DegenerateBoxError(DetlabError, ValueError):
    """面積がほぼゼロのボックス・クロップ"""


class ManifestError(DetlabError, ValueError):
    """データセットマニフェストの形式・整合性エラー"""


class CheckpointError(DetlabError, ValueError):
    """チェックポイントのバージョン・テンソル名・ペイロードのエラー"""


class AssignmentError(DetlabError, ValueError):
    """ハンガリアン割り当ての入力エラー"""


class TargetError(DetlabError, ValueError):
    """事前学習ターゲットの構築・ロス計算のエラー"""


class ConfigError(DetlabError, ValueError):
    """ExperimentConfig の検証エラー"""


class StageError(DetlabError, RuntimeError):
    """ステージの入力不足・互換性のないチェックポイント"""
