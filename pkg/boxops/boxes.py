"""バウンディングボックスの表現と IoU / GIoU 幾何。

座標はすべて画像サイズに対する割合（[0,1]）。
配列版の関数は末尾の軸が長さ4の任意形状を受け付ける。
"""
from __future__ import annotations

from typing import NamedTuple
import logging

import numpy as np

from detlab.exceptions import DegenerateBoxError, NonFiniteError

logger = logging.getLogger(__name__)

# これ未満の面積（正規化単位）のボックスは退化とみなす
MIN_BOX_AREA = 1e-8


class BoxCxCyWH(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


class BoxXYXY(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float


def _as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.shape[-1:] != (4,):
        raise ValueError(f"Boxes must have a trailing axis of length 4, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"Non-finite box coordinates: {arr.tolist()}", op='box')
    return arr


def cxcywh_to_xyxy(boxes) -> np.ndarray:
    """中心・幅高さ形式を角形式に変換し、[0,1] にクランプする"""
    arr = _as_boxes(boxes)
    cx, cy, w, h = np.moveaxis(arr, -1, 0)
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    return np.clip(out, 0.0, 1.0)


def xyxy_to_cxcywh(boxes) -> np.ndarray:
    arr = _as_boxes(boxes)
    x0, y0, x1, y1 = np.moveaxis(arr, -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def convert_box(box: BoxCxCyWH | BoxXYXY) -> BoxCxCyWH | BoxXYXY:
    """1個のボックスを反対の形式に変換する"""
    if isinstance(box, BoxCxCyWH):
        return BoxXYXY(*(float(v) for v in cxcywh_to_xyxy(box)))
    if isinstance(box, BoxXYXY):
        return BoxCxCyWH(*(float(v) for v in xyxy_to_cxcywh(box)))
    raise TypeError(f"Expected BoxCxCyWH or BoxXYXY, got {type(box).__name__}")


def box_area(xyxy) -> np.ndarray:
    arr = _as_boxes(xyxy)
    return np.clip(arr[..., 2] - arr[..., 0], 0.0, None) * np.clip(arr[..., 3] - arr[..., 1], 0.0, None)


def check_valid(xyxy, what: str = 'box') -> np.ndarray:
    """面積が MIN_BOX_AREA 未満のボックスがあれば DegenerateBoxError"""
    area = box_area(xyxy)
    if np.any(area < MIN_BOX_AREA):
        bad = np.asarray(xyxy)[area < MIN_BOX_AREA]
        raise DegenerateBoxError(f"Degenerate {what} (area < {MIN_BOX_AREA}): {np.asarray(bad).tolist()}")
    return area


def iou_giou_xyxy(a, b) -> tuple[np.ndarray, np.ndarray]:
    """角形式のボックス同士の IoU と GIoU（ブロードキャスト可）。

    giou = iou - (enclosure - union) / enclosure

    Raises:
        DegenerateBoxError: どちらかに面積ゼロのボックスがある場合
    """
    a = _as_boxes(a)
    b = _as_boxes(b)
    area_a = check_valid(a)
    area_b = check_valid(b)

    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    iou = inter / union

    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclosure = ew * eh
    giou = iou - (enclosure - union) / enclosure
    return iou, giou


def pairwise_iou_giou(a_xyxy, b_xyxy) -> tuple[np.ndarray, np.ndarray]:
    """(N,4) と (M,4) の全組み合わせ。戻り値は (N,M)"""
    a = _as_boxes(a_xyxy).reshape(-1, 4)
    b = _as_boxes(b_xyxy).reshape(-1, 4)
    return iou_giou_xyxy(a[:, None, :], b[None, :, :])


def giou(a: BoxCxCyWH | BoxXYXY, b: BoxCxCyWH | BoxXYXY) -> tuple[float, float]:
    """2個のボックスの (iou, giou)。形式が混在していてもよい"""
    xyxy = [cxcywh_to_xyxy(box) if isinstance(box, BoxCxCyWH) else _as_boxes(box) for box in (a, b)]
    iou, g = iou_giou_xyxy(xyxy[0], xyxy[1])
    return float(iou), float(g)


def box_cost(target: BoxCxCyWH, pred: BoxCxCyWH) -> tuple[float, float]:
    """(cxcywh 空間の L1, 1 - GIoU)"""
    l1 = float(np.abs(_as_boxes(target) - _as_boxes(pred)).sum())
    _, g = giou(target, pred)
    return l1, 1.0 - g


def pairwise_box_cost(pred_cxcywh, target_cxcywh) -> tuple[np.ndarray, np.ndarray]:
    """予測 (k,4) × ターゲット (m,4) の L1 コストと GIoU コスト。戻り値は (k,m)"""
    pred = _as_boxes(pred_cxcywh).reshape(-1, 4)
    target = _as_boxes(target_cxcywh).reshape(-1, 4)
    l1 = np.abs(pred[:, None, :] - target[None, :, :]).sum(axis=-1)
    _, g = pairwise_iou_giou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(target))
    return l1, 1.0 - g


def pixel_xywh_to_cxcywh(bbox, width: int, height: int) -> np.ndarray:
    """COCO形式のピクセル [x,y,w,h] を正規化 cxcywh に変換する"""
    x, y, w, h = (float(v) for v in bbox)
    return np.array([(x + w / 2) / width, (y + h / 2) / height, w / width, h / height], dtype=np.float64)


def cxcywh_to_pixel_xywh(box, width: int, height: int) -> list[float]:
    x0, y0, x1, y1 = cxcywh_to_xyxy(box)
    return [float(x0 * width), float(y0 * height), float((x1 - x0) * width), float((y1 - y0) * height)]
