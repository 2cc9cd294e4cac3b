"""集合予測ロス（事前学習・下流タスク共通）。

- 分類: 全 k クエリのクロスエントロピー。マッチしたクエリはターゲットのクラス、
  それ以外は ∅（重み w_∅）。λ_c·(1/k)Σ w_q·CE_q
- ボックス: マッチした対だけの λ_l1·L1 + λ_giou·(1 − GIoU)
- 埋め込み: マッチした対だけの λ_e·L1（DETReg 系のみ）
ボックスと埋め込みは max(m, 1) で割る。バッチの値は画像ごとのロスの平均。

割り当て σ は定数として扱い、σ を通した勾配は流さない。
"""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from autodiff.engine import Graph, Tensor
from boxops.boxes import cxcywh_to_xyxy
from detector.network import PredictionNodes
from detlab.exceptions import TargetError
from .costs import LossWeights, matching_cost_matrix, softmax
from .hungarian import Assignment, hungarian_assign
from .targets import PretrainTargetSet

logger = logging.getLogger(__name__)


@dataclass
class LossResult:
    total: Tensor
    breakdown: dict[str, float]
    assignments: list[Assignment]

    @property
    def value(self) -> float:
        return float(self.total.data)


def assign_batch(out: PredictionNodes, targets: list[PretrainTargetSet], weights: LossWeights) -> list[Assignment]:
    """現在の予測値からバッチ内の各画像のハンガリアン割り当てを求める"""
    probabilities = softmax(np.asarray(out.logits.data, dtype=np.float64))
    boxes = np.asarray(out.boxes.data, dtype=np.float64)
    assignments = []
    for b, target in enumerate(targets):
        cost = matching_cost_matrix(target.labels, target.boxes, probabilities[b], boxes[b], weights)
        assignments.append(hungarian_assign(cost))
    return assignments


def _column(graph: Graph, boxes: Tensor, index: int) -> Tensor:
    return graph.gather(boxes, [index], axis=1)


def giou_loss_terms(graph: Graph, pred_cxcywh: Tensor, target_cxcywh: np.ndarray) -> Tensor:
    """対ごとの 1 − GIoU (M, 1)。予測の角は [0,1] にクランプする"""
    cx, cy = _column(graph, pred_cxcywh, 0), _column(graph, pred_cxcywh, 1)
    w, h = _column(graph, pred_cxcywh, 2), _column(graph, pred_cxcywh, 3)
    px0 = graph.maximum(cx - w * 0.5, 0.0)
    py0 = graph.maximum(cy - h * 0.5, 0.0)
    px1 = graph.minimum(cx + w * 0.5, 1.0)
    py1 = graph.minimum(cy + h * 0.5, 1.0)

    t = cxcywh_to_xyxy(target_cxcywh).reshape(-1, 4)
    tx0, ty0, tx1, ty1 = (t[:, i:i + 1] for i in range(4))
    target_area = (tx1 - tx0) * (ty1 - ty0)

    inter = (graph.relu(graph.minimum(px1, tx1) - graph.maximum(px0, tx0))
             * graph.relu(graph.minimum(py1, ty1) - graph.maximum(py0, ty0)))
    pred_area = graph.relu(px1 - px0) * graph.relu(py1 - py0)
    union = pred_area + target_area - inter
    iou = inter / union
    enclosure = ((graph.maximum(px1, tx1) - graph.minimum(px0, tx0))
                 * (graph.maximum(py1, ty1) - graph.minimum(py0, ty0)))
    giou = iou - (enclosure - union) / enclosure
    return 1.0 - giou


def set_loss(graph: Graph, out: PredictionNodes, targets: list[PretrainTargetSet],
             assignments: list[Assignment], weights: LossWeights, *, use_embedding: bool) -> LossResult:
    """割り当て済みのバッチのロスを計算する。

    Raises:
        TargetError: 埋め込みを持たないターゲットで埋め込み項を要求した場合
    """
    batch, k, num_logits = out.logits.shape
    if len(targets) != batch or len(assignments) != batch:
        raise TargetError(f"Batch of {batch} predictions got {len(targets)} target sets and {len(assignments)} assignments")
    no_object = num_logits - 1

    # 分類項: (B*k) 個のクエリのクラスと重み
    labels = np.full((batch, k), no_object, dtype=np.int64)
    query_weights = np.full((batch, k), weights.no_object_weight, dtype=np.float64)
    pred_rows: list[int] = []
    target_boxes: list[np.ndarray] = []
    target_embeddings: list[np.ndarray] = []
    pair_scale: list[float] = []
    for b, (target, assignment) in enumerate(zip(targets, assignments)):
        if use_embedding and not target.has_embeddings:
            raise TargetError(f"Embedding term requested for scheme '{target.scheme}' without embeddings")
        if len(assignment.pred_for_target) != target.num_real:
            raise TargetError(f"Assignment covers {len(assignment.pred_for_target)} of {target.num_real} targets")
        if target.num_real and int(target.labels.max()) >= no_object:
            raise TargetError(f"Target class {int(target.labels.max())} does not fit a {num_logits}-way class head")
        scale = 1.0 / (max(target.num_real, 1) * batch)
        # 予測インデックス順に並べる（ターゲットの並べ替えで結果が変わらない）
        for q, j in assignment.pairs_by_prediction():
            labels[b, q] = target.labels[j]
            query_weights[b, q] = 1.0
            pred_rows.append(b * k + q)
            target_boxes.append(target.boxes[j])
            if use_embedding:
                target_embeddings.append(target.embeddings[j])
            pair_scale.append(scale)

    flat_index = (np.arange(batch * k) * num_logits + labels.reshape(-1))
    log_probs = graph.reshape(graph.log_softmax(out.logits, axis=-1), (batch * k * num_logits,))
    picked = graph.gather(log_probs, flat_index)
    coeff = -weights.class_weight * query_weights.reshape(-1) / (k * batch)
    loss_class = graph.sum(picked * coeff)
    terms = {'class': loss_class}

    if pred_rows:
        scale = np.asarray(pair_scale).reshape(-1, 1)
        boxes = graph.gather(graph.reshape(out.boxes, (batch * k, 4)), pred_rows)
        tboxes = np.stack(target_boxes)
        terms['l1'] = graph.sum(graph.abs(boxes - tboxes) * (scale * weights.l1_weight))
        terms['giou'] = graph.sum(giou_loss_terms(graph, boxes, tboxes) * (scale * weights.giou_weight))
        if use_embedding:
            d = out.embeddings.shape[-1]
            emb = graph.gather(graph.reshape(out.embeddings, (batch * k, d)), pred_rows)
            terms['embed'] = graph.sum(graph.abs(emb - np.stack(target_embeddings)) * (scale * weights.embed_weight))

    total = terms['class']
    for name in ('l1', 'giou', 'embed'):
        if name in terms:
            total = total + terms[name]
    breakdown = {name: float(terms[name].data) if name in terms else 0.0 for name in ('class', 'l1', 'giou', 'embed')}
    breakdown['total'] = float(total.data)
    return LossResult(total=total, breakdown=breakdown, assignments=list(assignments))


def match_and_loss(graph: Graph, out: PredictionNodes, targets: list[PretrainTargetSet],
                   weights: LossWeights, *, use_embedding: bool) -> LossResult:
    """割り当てを求めてからロスを計算する（学習ステップ用）"""
    return set_loss(graph, out, targets, assign_batch(out, targets, weights), weights, use_embedding=use_embedding)


def pretrain_loss(graph, out, targets, assignments, weights, *, use_embedding=None) -> LossResult:
    """事前学習ロス。use_embedding の既定はターゲットが埋め込みを持つかどうか"""
    if use_embedding is None:
        use_embedding = all(t.has_embeddings for t in targets)
    return set_loss(graph, out, targets, assignments, weights, use_embedding=use_embedding)


def downstream_loss(graph, out, targets, assignments, weights) -> LossResult:
    """下流タスク（正解ラベル）のロス。埋め込み項なし"""
    return set_loss(graph, out, targets, assignments, weights, use_embedding=False)
