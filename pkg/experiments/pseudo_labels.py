"""一回限りの疑似ラベル生成（教師の予測 / 選択的探索の提案）。

疑似ラベルはマニフェスト（COCO形式、score 付き）として保存し、
一度書いたファイルは作り直さない。
"""
from __future__ import annotations

from pathlib import Path
import logging

import numpy as np

from boxops.boxes import cxcywh_to_pixel_xywh
from detector.checkpoints import load_checkpoint
from detector.embedding import MIN_CROP_PIXELS
from detector.network import PredictionSet
from detlab.exceptions import CheckpointError, StageError
from proposals.selective_search import propose_boxes
from scenes.manifest import Annotation, DatasetManifest, load_manifest, save_manifest, with_annotations
from .inference import check_image_size, predict

logger = logging.getLogger(__name__)

OBJECT_CATEGORY = [{'id': 0, 'name': 'object', 'supercategory': 'proposal'}]


def select_pseudo_labels(pred: PredictionSet, count: int) -> list[tuple[int, np.ndarray, float]]:
    """∅ が最大のクエリを除き、クラス確率の高い順に最大 count 件。

    Returns:
        (クラスID, cxcywh, 信頼度) のリスト（信頼度は非増加）
    """
    probs = pred.probabilities
    no_object = probs.shape[-1] - 1
    real = probs[:, :no_object]
    candidates = np.flatnonzero(probs.argmax(axis=-1) != no_object)
    confidence = real.max(axis=-1)
    order = candidates[np.argsort(-confidence[candidates], kind='stable')][:count]
    labels = real.argmax(axis=-1)
    return [(int(labels[q]), np.asarray(pred.boxes[q], dtype=np.float64), float(confidence[q])) for q in order]


def _usable(bbox: list[float]) -> bool:
    # 埋め込みの切り出しができない小さなボックスは使わない
    return bbox[2] > 0 and bbox[3] > 0 and bbox[2] * bbox[3] >= MIN_CROP_PIXELS


def _annotate(corpus: DatasetManifest, per_image) -> list[Annotation]:
    annotations: list[Annotation] = []
    dropped = 0
    for image_id, items in per_image:
        entry = corpus.image(image_id)
        for class_id, box, score in items:
            bbox = cxcywh_to_pixel_xywh(box, entry.width, entry.height)
            if not _usable(bbox):
                dropped += 1
                continue
            annotations.append(Annotation(len(annotations) + 1, image_id, class_id, tuple(bbox), score))
    if dropped:
        logger.debug(f"Dropped {dropped} degenerate boxes while labeling {corpus.dataset_id}")
    return annotations


def generate_pseudo_labels(teacher_path: Path | str, corpus: DatasetManifest, count: int,
                           out_path: Path | str) -> DatasetManifest:
    """教師の予測から疑似ラベルのマニフェストを作る（1パスのみ）。

    out_path が既にあれば読み込んで返す。しきい値や NMS は使わない。

    Raises:
        StageError: 教師チェックポイントがない、コーパスの画像サイズが合わない
    """
    out_path = Path(out_path)
    if out_path.exists():
        logger.info(f"Pseudo-labels already written, reusing {out_path}")
        return load_manifest(out_path, root=corpus.root)

    try:
        teacher = load_checkpoint(teacher_path)
    except CheckpointError as e:
        raise StageError(f"Teacher checkpoint unavailable: {e}") from e
    if count > teacher.config.num_queries:
        raise StageError(f"pseudo_count {count} exceeds the teacher's {teacher.config.num_queries} queries")
    check_image_size(teacher, corpus)

    predictions = predict(teacher, corpus)
    annotations = _annotate(corpus, ((image_id, select_pseudo_labels(pred, count))
                                     for image_id, pred in predictions.items()))
    manifest = with_annotations(
        corpus, annotations,
        dataset_id=f'{corpus.dataset_id}+pseudo{count}',
        info={'pseudo_labels': {'source': 'teacher', 'teacher': Path(teacher_path).parent.name, 'count': count}},
    )
    save_manifest(manifest, out_path)
    logger.info(f"Pseudo-labeled {len(corpus.images)} images with {len(annotations)} boxes (k={count})")
    return manifest


def generate_proposal_labels(corpus: DatasetManifest, count: int, out_path: Path | str) -> DatasetManifest:
    """選択的探索の上位 count 件を1クラス（object）のラベルとして保存する"""
    out_path = Path(out_path)
    if out_path.exists():
        logger.info(f"Proposals already written, reusing {out_path}")
        return load_manifest(out_path, root=corpus.root)

    per_image = []
    for index, image_id in enumerate(corpus.image_ids):
        proposals = propose_boxes(corpus.load_pixels(image_id), top_k=count, seed=corpus.seed)
        per_image.append((image_id, [(0, np.asarray(p.box), p.score) for p in proposals]))
        if (index + 1) % 500 == 0:
            logger.info(f"Proposed boxes for {index + 1}/{len(corpus.images)} images")
    annotations = _annotate(corpus, per_image)
    manifest = with_annotations(
        corpus, annotations,
        dataset_id=f'{corpus.dataset_id}+ss{count}',
        categories=OBJECT_CATEGORY,
        info={'pseudo_labels': {'source': 'selective_search', 'count': count}},
    )
    save_manifest(manifest, out_path)
    return manifest


def labels_as_targets(manifest: DatasetManifest, image_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(クラスID, 正規化 cxcywh, スコア)。スコアのない注釈は 1.0"""
    labels, boxes = manifest.targets_for(image_id)
    scores = np.array([a.score if a.score is not None else 1.0 for a in manifest.annotations_for(image_id)],
                      dtype=np.float64)
    return labels, boxes, scores
