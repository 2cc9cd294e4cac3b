"""グラフベースの画像セグメンテーション（Selective Search の第1段）。"""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np
from skimage.segmentation import felzenszwalb

logger = logging.getLogger(__name__)

DEFAULT_SCALE = 100.0
DEFAULT_SIGMA = 0.0  # 描画した輪郭はアンチエイリアスなしの段差
DEFAULT_MIN_SIZE = 10


@dataclass(frozen=True)
class SegmentMap:
    labels: np.ndarray  # (H, W) int、0..count-1 の連番
    count: int


def segment_image(image: np.ndarray, scale: float = DEFAULT_SCALE, min_size: int = DEFAULT_MIN_SIZE,
                  seed: int = 0, sigma: float = DEFAULT_SIGMA) -> SegmentMap:
    """Felzenszwalb 法で色の近い画素をまとめる。

    min_size 未満のセグメントは隣接セグメントに吸収される。
    felzenszwalb 自体は決定的なので seed は使わない（呼び出し側の
    インターフェースを揃えるために受け取る）。
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    raw = felzenszwalb(image, scale=scale, sigma=sigma, min_size=min_size, channel_axis=-1)
    # 念のため 0..S-1 に詰め直す
    _, labels = np.unique(raw, return_inverse=True)
    labels = labels.reshape(raw.shape).astype(np.int64)
    count = int(labels.max()) + 1
    logger.debug(f"Segmented {image.shape[1]}x{image.shape[0]} image into {count} segments (scale={scale})")
    return SegmentMap(labels=labels, count=count)
