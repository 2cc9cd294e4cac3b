"""事前学習・ファインチューニングのターゲット集合。

実ターゲットはスコア降順に並べて [0, m) に置き、残り [m, k) は ∅ で埋める。
"""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from detlab.exceptions import TargetError

logger = logging.getLogger(__name__)

DETREG = 'detreg'
DETREG_PSEUDO_BOX = 'detreg_pseudo_box'
SELF_TRAIN = 'self_train'
SUPERVISED = 'supervised'

TARGET_SCHEMES = (DETREG, DETREG_PSEUDO_BOX, SELF_TRAIN, SUPERVISED)
EMBEDDING_SCHEMES = frozenset({DETREG, DETREG_PSEUDO_BOX})

# 2値（物体 / ∅）ヘッドでの「物体」クラス
BINARY_OBJECT = 0


@dataclass(frozen=True)
class TargetSources:
    """ターゲットの元データ。boxes は正規化 cxcywh (n, 4)"""
    boxes: np.ndarray
    scores: np.ndarray | None = None
    labels: np.ndarray | None = None
    embeddings: np.ndarray | None = None


@dataclass(frozen=True)
class PretrainTarget:
    """label が None なら ∅（ボックス・埋め込みなし）"""
    label: int | None
    box: np.ndarray | None
    embedding: np.ndarray | None


@dataclass(frozen=True)
class PretrainTargetSet:
    scheme: str
    num_queries: int
    labels: np.ndarray                 # (m,)
    boxes: np.ndarray                  # (m, 4)
    embeddings: np.ndarray | None      # (m, d)

    @property
    def num_real(self) -> int:
        return int(self.labels.shape[0])

    @property
    def has_embeddings(self) -> bool:
        return self.embeddings is not None

    @property
    def entries(self) -> list[PretrainTarget]:
        real = [
            PretrainTarget(int(self.labels[j]), self.boxes[j],
                           self.embeddings[j] if self.embeddings is not None else None)
            for j in range(self.num_real)
        ]
        return real + [PretrainTarget(None, None, None)] * (self.num_queries - self.num_real)

    def permuted(self, order) -> 'PretrainTargetSet':
        order = np.asarray(order, dtype=np.int64)
        return PretrainTargetSet(
            scheme=self.scheme,
            num_queries=self.num_queries,
            labels=self.labels[order],
            boxes=self.boxes[order],
            embeddings=self.embeddings[order] if self.embeddings is not None else None,
        )


def build_targets(scheme: str, sources: TargetSources, k: int, d: int | None = None) -> PretrainTargetSet:
    """スキームに応じたターゲット集合を作る。

    - detreg / detreg_pseudo_box: 2値の物体クラス + ボックス + 切り出し埋め込み
    - self_train: 教師の予測クラス + ボックス（埋め込みなし）
    - supervised: 正解クラス + ボックス（埋め込みなし）

    Raises:
        TargetError: 実ターゲットが k を超える、元データがスキームに合わない
    """
    if scheme not in TARGET_SCHEMES:
        raise TargetError(f"Unknown target scheme '{scheme}'")
    boxes = np.asarray(sources.boxes, dtype=np.float64).reshape(-1, 4)
    count = boxes.shape[0]
    if count > k:
        raise TargetError(f"{count} real targets do not fit into {k} queries; cap the source count at k")

    if sources.scores is not None:
        scores = np.asarray(sources.scores, dtype=np.float64)
        if scores.shape != (count,):
            raise TargetError(f"scores shape {scores.shape} does not match {count} boxes")
        order = np.argsort(-scores, kind='stable')
    else:
        order = np.arange(count)

    if scheme in EMBEDDING_SCHEMES:
        if sources.embeddings is None:
            raise TargetError(f"Scheme '{scheme}' needs crop embeddings")
        embeddings = np.asarray(sources.embeddings, dtype=np.float32)
        if count == 0:
            embeddings = np.zeros((0, d or 0), dtype=np.float32)
        embeddings = embeddings.reshape(count, -1) if count else embeddings
        if d is not None and count and embeddings.shape[1] != d:
            raise TargetError(f"Embedding dim {embeddings.shape[1]} != {d}")
        labels = np.full(count, BINARY_OBJECT, dtype=np.int64)
        embeddings = embeddings[order]
    else:
        if sources.labels is None:
            raise TargetError(f"Scheme '{scheme}' needs class labels")
        if sources.embeddings is not None:
            raise TargetError(f"Scheme '{scheme}' does not use embeddings")
        labels = np.asarray(sources.labels, dtype=np.int64).reshape(-1)
        if labels.shape != (count,):
            raise TargetError(f"labels shape {labels.shape} does not match {count} boxes")
        labels = labels[order]
        embeddings = None

    return PretrainTargetSet(scheme=scheme, num_queries=k, labels=labels, boxes=boxes[order], embeddings=embeddings)
