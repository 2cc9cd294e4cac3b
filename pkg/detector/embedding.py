from __future__ import annotations

"""凍結バックボーンによる切り出し領域の埋め込み（DETReg の埋め込みターゲット）。"""

import logging

import numpy as np
from PIL import Image

from boxops.boxes import BoxCxCyWH, cxcywh_to_xyxy
from detlab.exceptions import DegenerateBoxError
from detlab.utils import derive_rng
from .network import ModelParams, backbone_features, patchify

logger = logging.getLogger(__name__)

# 切り出した領域はこの大きさ（パッチ 2×2 枚分）に揃える
CROP_SIZE = 16
MIN_CROP_PIXELS = 4.0
# 射影行列の乱数系列（コンポーネント番号と重ならない値）
PROJECTION_KEY = 101


def embedding_projection(params: ModelParams) -> np.ndarray:
    """バックボーン幅 → d への固定射影。モデルのシードだけで決まり、学習されない"""
    config = params.config
    rng = derive_rng(config.seed, PROJECTION_KEY)
    return (rng.standard_normal((config.width, config.embed_dim)) / np.sqrt(config.width)).astype(np.float32)


def crop_pixels(image: np.ndarray, box: BoxCxCyWH) -> Image.Image:
    """正規化ボックスの領域を切り出し、CROP_SIZE 四方にリサイズする"""
    height, width = image.shape[:2]
    x0, y0, x1, y1 = cxcywh_to_xyxy(box)
    area = (x1 - x0) * width * (y1 - y0) * height
    if area < MIN_CROP_PIXELS:
        raise DegenerateBoxError(f"Crop of {area:.2f} pixels is too small to embed: {tuple(box)}")

    pil = Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8))
    left = int(np.floor(x0 * width))
    top = int(np.floor(y0 * height))
    right = max(int(np.ceil(x1 * width)), left + 1)
    bottom = max(int(np.ceil(y1 * height)), top + 1)
    return pil.crop((left, top, right, bottom)).resize((CROP_SIZE, CROP_SIZE), Image.BILINEAR)


def crop_embed(params: ModelParams, image: np.ndarray, box: BoxCxCyWH,
               projection: np.ndarray | None = None) -> np.ndarray:
    """ボックス領域の埋め込み（L2 正規化済み、長さ d）

    Raises:
        DegenerateBoxError: 領域が4画素未満の場合
    """
    crop = np.asarray(crop_pixels(image, box), dtype=np.float32) / 255.0
    patches = patchify(crop, params.config.patch_size)[0]
    pooled = backbone_features(params, patches).mean(axis=0)
    if projection is None:
        projection = embedding_projection(params)
    vector = pooled @ projection
    norm = float(np.linalg.norm(vector))
    return (vector / max(norm, 1e-12)).astype(np.float32)


def crop_embed_many(params: ModelParams, image: np.ndarray, boxes) -> np.ndarray:
    """複数ボックスの埋め込み (m, d)"""
    projection = embedding_projection(params)
    vectors = [crop_embed(params, image, BoxCxCyWH(*box), projection) for box in boxes]
    if not vectors:
        return np.zeros((0, params.config.embed_dim), dtype=np.float32)
    return np.stack(vectors)
