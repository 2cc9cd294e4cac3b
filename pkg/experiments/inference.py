"""学習済みパラメータでの推論と評価。"""
from __future__ import annotations

import logging

import numpy as np

from boxops.boxes import BoxCxCyWH
from detector.network import ModelParams, PredictionSet, forward
from detlab.exceptions import StageError
from evaluation.metrics import Detection, MetricsTable, evaluate_detections, ground_truth_from_manifest
from scenes.manifest import DatasetManifest

logger = logging.getLogger(__name__)

PREDICT_BATCH = 32


def load_images(manifest: DatasetManifest, image_ids=None) -> np.ndarray:
    """(N, H, W, 3) float32"""
    ids = manifest.image_ids if image_ids is None else list(image_ids)
    if not ids:
        raise StageError(f"Dataset {manifest.dataset_id} has no images")
    return np.stack([manifest.load_pixels(image_id) for image_id in ids])


def check_image_size(params: ModelParams, manifest: DatasetManifest):
    size = params.config.image_size
    for entry in manifest.images:
        if (entry.width, entry.height) != (size, size):
            raise StageError(
                f"Image {entry.id} of {manifest.dataset_id} is {entry.width}x{entry.height}, model expects {size}x{size}"
            )


def predict(params: ModelParams, manifest: DatasetManifest, batch_size: int = PREDICT_BATCH) -> dict[int, PredictionSet]:
    """画像ID → PredictionSet（マニフェストの順）"""
    check_image_size(params, manifest)
    ids = manifest.image_ids
    predictions: dict[int, PredictionSet] = {}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        for image_id, pred in zip(chunk, forward(params, load_images(manifest, chunk))):
            predictions[image_id] = pred
    return predictions


def detections_from_prediction(image_id: int, pred: PredictionSet) -> list[Detection]:
    """クエリごとに1検出。クラスは ∅ を除いた最大確率のもの"""
    probs = pred.probabilities[:, :-1]
    labels = probs.argmax(axis=-1)
    confidence = probs.max(axis=-1)
    return [
        Detection(image_id, int(labels[q]), BoxCxCyWH(*(float(v) for v in pred.boxes[q])), float(confidence[q]))
        for q in range(len(labels))
    ]


def evaluate_params(params: ModelParams, manifest: DatasetManifest) -> MetricsTable:
    """評価用分割での MetricsTable（AR@k の k はクエリ数）"""
    predictions = predict(params, manifest)
    detections = [d for image_id, pred in predictions.items() for d in detections_from_prediction(image_id, pred)]
    return evaluate_detections(detections, ground_truth_from_manifest(manifest), k=params.config.num_queries)
