"""COCO 方式の検出評価（AP / AR）。

- IoU しきい値は 0.50:0.05:0.95 の10段階。一致は IoU ≥ しきい値（閉区間）
- 適合率は右から単調化し、101点の再現率で平均する
- サイズ区分は正解ボックスの面積比: S < 2.5%, M [2.5%, 10%), L ≥ 10%
- 検出は (信頼度降順, 画像ID, 画像内の順番) で並べるので、画像の順序に依存しない
"""
from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from boxops.boxes import BoxCxCyWH, cxcywh_to_xyxy
from detlab.exceptions import ManifestError, NonFiniteError

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(float(t) for t in np.round(0.5 + 0.05 * np.arange(10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

SMALL_AREA = 0.025
LARGE_AREA = 0.10
AREA_RANGES = {
    'all': (0.0, math.inf),
    'small': (0.0, SMALL_AREA),
    'medium': (SMALL_AREA, LARGE_AREA),
    'large': (LARGE_AREA, math.inf),
}

# 表の列（この順で出力する）
TABLE_COLUMNS = ('AP', 'AP50', 'AP75', 'AP_S', 'AP_M', 'AP_L')
RECALL_COLUMNS = ('AR@1', 'AR@10', 'AR@k')


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    box: BoxCxCyWH
    confidence: float

    def __post_init__(self):
        if not math.isfinite(self.confidence):
            raise NonFiniteError(f"Detection on image {self.image_id} has confidence {self.confidence}", op='detection')


@dataclass(frozen=True)
class GroundTruthSet:
    """1枚分の正解。boxes は正規化 cxcywh (m, 4)"""
    labels: np.ndarray
    boxes: np.ndarray

    @classmethod
    def from_arrays(cls, labels, boxes) -> 'GroundTruthSet':
        return cls(np.asarray(labels, dtype=np.int64).reshape(-1),
                   np.asarray(boxes, dtype=np.float64).reshape(-1, 4))

    @property
    def areas(self) -> np.ndarray:
        return self.boxes[:, 2] * self.boxes[:, 3]


@dataclass
class MetricsTable:
    """評価結果。正解が1件もない区分の値は None"""
    ap: float
    ap50: float
    ap75: float
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    ar1: float | None
    ar10: float | None
    ar_k: float | None
    k: int
    per_class_ap: dict[int, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def row(self) -> dict[str, float | None]:
        return {
            'AP': self.ap, 'AP50': self.ap50, 'AP75': self.ap75,
            'AP_S': self.ap_small, 'AP_M': self.ap_medium, 'AP_L': self.ap_large,
            'AR@1': self.ar1, 'AR@10': self.ar10, 'AR@k': self.ar_k,
        }

    def to_dict(self) -> dict:
        return {
            **self.row(),
            'k': self.k,
            'per_class_ap': {str(c): v for c, v in sorted(self.per_class_ap.items())},
            'counts': dict(self.counts),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'MetricsTable':
        return cls(
            ap=data['AP'], ap50=data['AP50'], ap75=data['AP75'],
            ap_small=data['AP_S'], ap_medium=data['AP_M'], ap_large=data['AP_L'],
            ar1=data['AR@1'], ar10=data['AR@10'], ar_k=data['AR@k'], k=int(data['k']),
            per_class_ap={int(c): v for c, v in data.get('per_class_ap', {}).items()},
            counts=dict(data.get('counts', {})),
        )


def pairwise_iou(a_cxcywh, b_cxcywh) -> np.ndarray:
    """(N,4) × (M,4) の IoU。面積ゼロ同士は IoU 0 とする"""
    a = cxcywh_to_xyxy(np.asarray(a_cxcywh, dtype=np.float64).reshape(-1, 4))[:, None, :]
    b = cxcywh_to_xyxy(np.asarray(b_cxcywh, dtype=np.float64).reshape(-1, 4))[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _match_image(ious: np.ndarray, gt_ignore: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """信頼度順の検出を未一致の正解に貪欲に一致させる。

    無視しない正解を優先し、その中で IoU が最大のものを選ぶ。

    Returns:
        (一致したか (D,), 無視対象の正解に一致したか (D,))
    """
    num_dets, num_gts = ious.shape
    # 無視しない正解を先に並べる（安定ソート）
    gt_order = np.argsort(gt_ignore, kind='stable')
    taken = np.zeros(num_gts, dtype=bool)
    matched = np.zeros(num_dets, dtype=bool)
    matched_ignored = np.zeros(num_dets, dtype=bool)
    for d in range(num_dets):
        best, best_iou = -1, threshold
        for g in gt_order:
            if taken[g]:
                continue
            if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                break
            if ious[d, g] < best_iou:
                continue
            best, best_iou = g, ious[d, g]
        if best > -1:
            taken[best] = True
            matched[d] = True
            matched_ignored[d] = gt_ignore[best]
    return matched, matched_ignored


def average_precision(scores, sort_keys, true_positive, num_positive: int) -> float:
    """101点補間の AP。

    Args:
        scores: 検出の信頼度（無視対象を除いたもの）
        sort_keys: 同点時の順序キー (画像ID, 画像内の順番) の組
        true_positive: 各検出が正解に一致したか
        num_positive: 無視しない正解の数（> 0）
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return 0.0
    image_ids, det_index = sort_keys
    order = np.lexsort((det_index, image_ids, -scores))
    tp = np.asarray(true_positive, dtype=bool)[order]
    tp_sum = np.cumsum(tp, dtype=np.float64)
    fp_sum = np.cumsum(~tp, dtype=np.float64)
    recall = tp_sum / num_positive
    precision = tp_sum / (tp_sum + fp_sum)
    # 右から単調非増加にする
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    sampled = np.zeros(len(RECALL_POINTS))
    idx = np.searchsorted(recall, RECALL_POINTS, side='left')
    valid = idx < len(precision)
    sampled[valid] = precision[idx[valid]]
    return float(sampled.mean())


def _index_detections(detections, gt: Mapping[int, GroundTruthSet]) -> dict[int, list[Detection]]:
    by_image: dict[int, list[Detection]] = {image_id: [] for image_id in gt}
    for det in _flatten(detections):
        if det.image_id not in by_image:
            raise ManifestError(f"detection references unknown image id {det.image_id}")
        by_image[det.image_id].append(det)
    return by_image


def _flatten(detections) -> Iterable[Detection]:
    if isinstance(detections, Mapping):
        for image_id in sorted(detections):
            yield from detections[image_id]
    else:
        yield from detections


def _top_by_confidence(dets: list[Detection], limit: int | None) -> list[Detection]:
    # 画像内の並びは信頼度降順、同点は元の順番
    ranked = sorted(enumerate(dets), key=lambda pair: (-pair[1].confidence, pair[0]))
    if limit is not None:
        ranked = ranked[:limit]
    return [det for _, det in ranked]


def _class_ap(by_image: dict[int, list[Detection]], gt: Mapping[int, GroundTruthSet],
              class_id: int, area_range: tuple[float, float], max_dets: int | None) -> np.ndarray | None:
    """1クラス・1サイズ区分のしきい値ごとの AP (T,)。正解がなければ None"""
    low, high = area_range
    num_t = len(IOU_THRESHOLDS)
    scores, image_keys, det_keys = [], [], []
    tp_rows: list[np.ndarray] = []
    keep_rows: list[np.ndarray] = []
    num_positive = 0

    for image_id in sorted(by_image):
        truth = gt[image_id]
        gt_mask = truth.labels == class_id
        gt_boxes = truth.boxes[gt_mask]
        gt_areas = truth.areas[gt_mask]
        gt_ignore = (gt_areas < low) | (gt_areas >= high)
        num_positive += int((~gt_ignore).sum())

        dets = _top_by_confidence([d for d in by_image[image_id] if d.class_id == class_id], max_dets)
        if not dets:
            continue
        det_boxes = np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4)
        det_areas = det_boxes[:, 2] * det_boxes[:, 3]
        outside = (det_areas < low) | (det_areas >= high)
        ious = pairwise_iou(det_boxes, gt_boxes) if len(gt_boxes) else np.zeros((len(dets), 0))

        matched = np.zeros((num_t, len(dets)), dtype=bool)
        keep = np.zeros((num_t, len(dets)), dtype=bool)
        for t, threshold in enumerate(IOU_THRESHOLDS):
            hit, hit_ignored = _match_image(ious, gt_ignore, threshold)
            matched[t] = hit
            # 無視対象に一致した検出と、区分外で一致しなかった検出は数えない
            keep[t] = ~(hit_ignored | (~hit & outside))
        tp_rows.append(matched)
        keep_rows.append(keep)
        scores.extend(d.confidence for d in dets)
        image_keys.extend([image_id] * len(dets))
        det_keys.extend(range(len(dets)))

    if num_positive == 0:
        return None
    if not scores:
        return np.zeros(num_t)
    scores_arr = np.asarray(scores)
    image_arr = np.asarray(image_keys)
    det_arr = np.asarray(det_keys)
    tp_all = np.concatenate(tp_rows, axis=1)
    keep_all = np.concatenate(keep_rows, axis=1)
    result = np.zeros(num_t)
    for t in range(num_t):
        k = keep_all[t]
        result[t] = average_precision(scores_arr[k], (image_arr[k], det_arr[k]), tp_all[t][k], num_positive)
    return result


def _mean_or_none(values: list[np.ndarray]) -> float | None:
    if not values:
        return None
    return float(np.mean(np.stack(values)))


def evaluate_detections(detections, gt: Mapping[int, GroundTruthSet], *, k: int | None = None,
                        max_detections: int | None = None) -> MetricsTable:
    """検出結果を評価して MetricsTable を返す。

    Args:
        detections: Detection の並び、または画像ID → Detection リストの辞書
        gt: 画像ID → GroundTruthSet
        k: AR@k の k（クエリ数）。None なら画像あたり最大の検出数
        max_detections: AP 計算に使う画像・クラスあたりの上位件数

    Raises:
        ManifestError: gt にない画像IDを参照する検出があった場合
    """
    by_image = _index_detections(detections, gt)
    classes = sorted({int(c) for truth in gt.values() for c in truth.labels})
    if k is None:
        k = max((len(dets) for dets in by_image.values()), default=0) or 1

    per_range: dict[str, list[np.ndarray]] = {name: [] for name in AREA_RANGES}
    per_class_ap: dict[int, float] = {}
    for class_id in classes:
        for name, area_range in AREA_RANGES.items():
            ap = _class_ap(by_image, gt, class_id, area_range, max_detections)
            if ap is None:
                continue
            per_range[name].append(ap)
            if name == 'all':
                per_class_ap[class_id] = float(ap.mean())

    overall = per_range['all']
    if overall:
        by_threshold = np.mean(np.stack(overall), axis=0)
        ap, ap50, ap75 = float(by_threshold.mean()), float(by_threshold[0]), float(by_threshold[5])
    else:
        ap = ap50 = ap75 = 0.0

    ranked = {image_id: [d.box for d in _top_by_confidence(dets, None)] for image_id, dets in by_image.items()}
    recall = evaluate_recall(ranked, gt, at=(1, 10, k))
    num_gt = sum(len(truth.labels) for truth in gt.values())
    table = MetricsTable(
        ap=ap, ap50=ap50, ap75=ap75,
        ap_small=_mean_or_none(per_range['small']),
        ap_medium=_mean_or_none(per_range['medium']),
        ap_large=_mean_or_none(per_range['large']),
        ar1=recall[1], ar10=recall[10], ar_k=recall[k], k=k,
        per_class_ap=per_class_ap,
        counts={
            'images': len(gt),
            'ground_truth': num_gt,
            'detections': sum(len(dets) for dets in by_image.values()),
        },
    )
    logger.debug(f"Evaluated {table.counts}: AP={ap:.4f} AP50={ap50:.4f} AP75={ap75:.4f}")
    return table


def evaluate_recall(proposals: Mapping[int, object], gt: Mapping[int, GroundTruthSet],
                    at: Iterable[int] = (1, 10)) -> dict[int, float | None]:
    """クラスを区別しない AR@n。

    画像ごとに上位 n 件の提案（与えられた順序が順位）を正解に貪欲に一致させ、
    全画像の再現率を10段階のしきい値で平均する。正解が1件もなければ None。
    """
    counts = sorted({int(n) for n in at})
    if any(n < 1 for n in counts):
        raise ValueError(f"Recall counts must be >= 1, got {counts}")
    for image_id in proposals:
        if image_id not in gt:
            raise ManifestError(f"proposal references unknown image id {image_id}")

    num_gt = sum(len(truth.labels) for truth in gt.values())
    if num_gt == 0:
        return {n: None for n in counts}

    hits = {n: np.zeros(len(IOU_THRESHOLDS)) for n in counts}
    for image_id in sorted(gt):
        truth = gt[image_id]
        boxes = np.asarray(proposals.get(image_id, []), dtype=np.float64).reshape(-1, 4)
        if len(truth.boxes) == 0 or len(boxes) == 0:
            continue
        ious = pairwise_iou(boxes, truth.boxes)
        ignore = np.zeros(len(truth.boxes), dtype=bool)
        for n in counts:
            top = ious[:n]
            for t, threshold in enumerate(IOU_THRESHOLDS):
                matched, _ = _match_image(top, ignore, threshold)
                hits[n][t] += int(matched.sum())
    return {n: float(np.mean(hits[n] / num_gt)) for n in counts}


def ground_truth_from_manifest(manifest) -> dict[int, GroundTruthSet]:
    """DatasetManifest の正解を画像ID → GroundTruthSet にする"""
    return {image_id: GroundTruthSet.from_arrays(*manifest.targets_for(image_id)) for image_id in manifest.image_ids}
