"""Selective Search を簡略化した教師なし領域提案。

1. segment_image で初期セグメントを作る
2. 隣接するセグメント対のうち最も類似度の高い対を1つずつ併合する
   （類似度 = 色ヒストグラム交差 + サイズ + 外接矩形の充填率）
3. 併合の過程で現れた全領域の外接矩形を候補にする
4. 後の併合ほど上位、同じ深さは乱数で順序付け、ほぼ画像全体の矩形は最後尾
5. IoU > 0.95 の重複を落として上位 k̄ 個を返す
"""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from boxops.boxes import BoxCxCyWH, pairwise_iou_giou, xyxy_to_cxcywh
from .segmentation import DEFAULT_MIN_SIZE, DEFAULT_SCALE, SegmentMap, segment_image

logger = logging.getLogger(__name__)

HIST_BINS = 25
DUPLICATE_IOU = 0.95
DEFAULT_TOP_K = 10


@dataclass(frozen=True)
class Proposal:
    box: BoxCxCyWH
    score: float


@dataclass
class Region:
    """併合階層の1領域。bbox はピクセル単位の [x0, y0, x1, y1)"""
    size: int
    bbox: tuple[int, int, int, int]
    hist: np.ndarray
    level: int


def _initial_regions(image: np.ndarray, segments: SegmentMap) -> list[Region]:
    labels = segments.labels
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=segments.count)
    ys, xs = np.indices(labels.shape)

    regions = []
    pixels = image.reshape(-1, image.shape[-1])
    bins = np.minimum((pixels * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    for label in range(segments.count):
        mask = flat == label
        member_x = xs.ravel()[mask]
        member_y = ys.ravel()[mask]
        hist = np.concatenate([
            np.bincount(bins[mask, channel], minlength=HIST_BINS) for channel in range(pixels.shape[1])
        ]).astype(np.float64)
        hist /= hist.sum()
        regions.append(Region(
            size=int(sizes[label]),
            bbox=(int(member_x.min()), int(member_y.min()), int(member_x.max()) + 1, int(member_y.max()) + 1),
            hist=hist,
            level=0,
        ))
    return regions


def _neighbours(labels: np.ndarray) -> set[tuple[int, int]]:
    pairs = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        differ = a != b
        lo = np.minimum(a[differ], b[differ])
        hi = np.maximum(a[differ], b[differ])
        pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def _similarity(r1: Region, r2: Region, image_area: int) -> float:
    colour = float(np.minimum(r1.hist, r2.hist).sum())
    size = 1.0 - (r1.size + r2.size) / image_area
    x0 = min(r1.bbox[0], r2.bbox[0])
    y0 = min(r1.bbox[1], r2.bbox[1])
    x1 = max(r1.bbox[2], r2.bbox[2])
    y1 = max(r1.bbox[3], r2.bbox[3])
    fill = 1.0 - ((x1 - x0) * (y1 - y0) - r1.size - r2.size) / image_area
    return colour + size + fill


def _merge(r1: Region, r2: Region, level: int) -> Region:
    size = r1.size + r2.size
    return Region(
        size=size,
        bbox=(min(r1.bbox[0], r2.bbox[0]), min(r1.bbox[1], r2.bbox[1]),
              max(r1.bbox[2], r2.bbox[2]), max(r1.bbox[3], r2.bbox[3])),
        hist=(r1.hist * r1.size + r2.hist * r2.size) / size,
        level=level,
    )


def hierarchical_grouping(image: np.ndarray, segments: SegmentMap) -> list[Region]:
    """全セグメントが1つになるまで併合し、現れた全領域を返す（生成順）"""
    height, width = segments.labels.shape
    image_area = height * width
    regions = _initial_regions(image, segments)
    similarities = {
        (i, j): _similarity(regions[i], regions[j], image_area) for i, j in sorted(_neighbours(segments.labels))
    }

    step = 0
    while similarities:
        # 同点は番号の小さい対を優先
        (i, j), _ = max(similarities.items(), key=lambda item: (item[1], -item[0][0], -item[0][1]))
        step += 1
        new_index = len(regions)
        regions.append(_merge(regions[i], regions[j], step))

        touching = set()
        for pair in [p for p in similarities if i in p or j in p]:
            del similarities[pair]
            touching.update(pair)
        touching -= {i, j}
        for other in sorted(touching):
            similarities[(other, new_index)] = _similarity(regions[other], regions[new_index], image_area)

    logger.debug(f"Hierarchical grouping: {segments.count} segments, {step} merges, {len(regions)} regions")
    return regions


def rank_regions(regions: list[Region], image_shape: tuple[int, int], seed: int) -> np.ndarray:
    """領域の外接矩形（正規化 xyxy）を順位順に並べ、重複を落として返す"""
    height, width = image_shape
    boxes = np.array(
        [[r.bbox[0] / width, r.bbox[1] / height, r.bbox[2] / width, r.bbox[3] / height] for r in regions],
        dtype=np.float64,
    )
    levels = np.array([r.level for r in regions])
    tie_break = np.random.default_rng(seed).random(len(regions))
    full_image, _ = pairwise_iou_giou(boxes, np.array([[0.0, 0.0, 1.0, 1.0]]))
    demoted = full_image[:, 0] > DUPLICATE_IOU

    # lexsort は最後のキーが最優先
    order = np.lexsort((tie_break, -levels, demoted))

    kept: list[int] = []
    for index in order:
        if kept:
            iou, _ = pairwise_iou_giou(boxes[index], boxes[kept])
            if np.any(iou > DUPLICATE_IOU):
                continue
        kept.append(int(index))
    return boxes[kept]


def propose_boxes(image: np.ndarray, top_k: int = DEFAULT_TOP_K, seed: int = 0, *,
                  scale: float = DEFAULT_SCALE, min_size: int = DEFAULT_MIN_SIZE) -> list[Proposal]:
    """画像から最大 top_k 個の順位付き提案を返す。

    スコアは順位から決まり（1, 1-1/n, ...）、リスト内で単調非増加。
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    image = np.asarray(image, dtype=np.float64)
    segments = segment_image(image, scale=scale, min_size=min_size, seed=seed)
    regions = hierarchical_grouping(image, segments)
    ranked = rank_regions(regions, image.shape[:2], seed)

    total = len(ranked)
    proposals = []
    for rank, xyxy in enumerate(ranked[:top_k]):
        proposals.append(Proposal(box=BoxCxCyWH(*(float(v) for v in xyxy_to_cxcywh(xyxy))), score=1.0 - rank / total))
    return proposals
