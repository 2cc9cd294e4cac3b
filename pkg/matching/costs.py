from __future__ import annotations

from dataclasses import asdict, dataclass
import logging

import numpy as np

from boxops.boxes import pairwise_box_cost
from detlab.exceptions import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """ロス係数。マッチングコストも同じ係数を使う"""
    class_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    embed_weight: float = 1.0
    no_object_weight: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"Loss weight {name} must be non-negative, got {value}")
        if self.l1_weight + self.giou_weight <= 0:
            raise ConfigError('l1_weight + giou_weight must be positive')

    def to_dict(self) -> dict:
        return asdict(self)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def matching_cost_matrix(target_labels, target_boxes, probabilities, pred_boxes,
                         weights: LossWeights) -> np.ndarray:
    """(m, k) のマッチングコスト。

    cost(j, q) = λ_c·(1 − p_q(c_j)) + λ_l1·L1(b_j, b_q) + λ_giou·(1 − GIoU(b_j, b_q))

    Raises:
        DegenerateBoxError: 予測ボックスの面積がほぼゼロの場合
    """
    labels = np.asarray(target_labels, dtype=np.int64)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if labels.size == 0:
        return np.zeros((0, probabilities.shape[0]))
    class_cost = 1.0 - probabilities[:, labels].T
    l1, giou_cost = pairwise_box_cost(target_boxes, pred_boxes)
    cost = weights.class_weight * class_cost + weights.l1_weight * l1 + weights.giou_weight * giou_cost
    # 丸めで僅かに負になる分を0に揃える
    return np.maximum(cost, 0.0)
