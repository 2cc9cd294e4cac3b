from __future__ import annotations

"""図形の語彙とレイアウト・描画。

クラス c は SHAPES[c] の図形で、クラスごとに決まった色系統を持つ。
描画は Pillow の ImageDraw でマスクを作り、アノテーションのボックスは
そのマスクの外接矩形（getbbox）をそのまま使う。
"""

from dataclasses import dataclass
import logging

import numpy as np
from PIL import Image, ImageDraw

from detlab.exceptions import ConfigError

logger = logging.getLogger(__name__)

SHAPES = ('circle', 'square', 'triangle', 'ring', 'cross', 'bar')

# 色系統（RGB, [0,1]）
COLOR_FAMILIES = {
    'circle': (0.85, 0.15, 0.15),    # 赤
    'square': (0.15, 0.80, 0.20),    # 緑
    'triangle': (0.20, 0.30, 0.90),  # 青
    'ring': (0.90, 0.85, 0.15),      # 黄
    'cross': (0.85, 0.20, 0.85),     # マゼンタ
    'bar': (0.15, 0.85, 0.85),       # シアン
}

# 重ならない配置を探す回数（サイズ1段ごと）
PLACEMENT_TRIES = 30


@dataclass(frozen=True)
class SceneSpec:
    """合成シーンの生成条件"""
    image_size: int = 64
    num_classes: int = 6
    min_objects: int = 1
    max_objects: int = 6
    allow_occlusion: bool = False
    noise: float = 0.03
    jitter: float = 0.08

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must be in [2, {len(SHAPES)}], got {self.num_classes}")
        if not 1 <= self.min_objects <= self.max_objects <= 20:
            raise ConfigError(f"need 1 <= min_objects <= max_objects <= 20, got [{self.min_objects}, {self.max_objects}]")
        if self.noise < 0 or self.jitter < 0:
            raise ConfigError('noise and jitter must be non-negative')

    @property
    def min_extent(self) -> int:
        return self.image_size // 8

    @property
    def max_extent(self) -> int:
        return 3 * self.image_size // 8

    def to_dict(self) -> dict:
        return {
            'image_size': self.image_size,
            'num_classes': self.num_classes,
            'min_objects': self.min_objects,
            'max_objects': self.max_objects,
            'allow_occlusion': self.allow_occlusion,
            'noise': self.noise,
            'jitter': self.jitter,
        }


@dataclass(frozen=True)
class PlacedShape:
    """1個の図形の配置（ピクセル単位の正方形領域 x, y, extent）"""
    class_id: int
    x: int
    y: int
    extent: int
    color: tuple[float, float, float]
    vertical: bool = False

    @property
    def kind(self) -> str:
        return SHAPES[self.class_id]


def _overlaps(x: int, y: int, s: int, placed: list[PlacedShape]) -> bool:
    # 1ピクセルの隙間を空ける
    for other in placed:
        if (x < other.x + other.extent + 1 and other.x < x + s + 1
                and y < other.y + other.extent + 1 and other.y < y + s + 1):
            return True
    return False


def sample_layout(spec: SceneSpec, rng: np.random.Generator) -> list[PlacedShape]:
    """1枚分の図形配置をサンプリングする（ピクセルは描かない）。

    物体数は [min_objects, max_objects] の一様分布。遮蔽なしの場合は
    棄却サンプリングで重ならない位置を探し、見つからなければサイズを
    1ずつ縮める。最小サイズでも置けない場合だけ重なりを許す。
    """
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    size = spec.image_size
    placed: list[PlacedShape] = []
    for _ in range(count):
        class_id = int(rng.integers(spec.num_classes))
        extent = int(rng.integers(spec.min_extent, spec.max_extent + 1))
        base = np.array(COLOR_FAMILIES[SHAPES[class_id]])
        color = tuple(float(c) for c in np.clip(base + rng.uniform(-spec.jitter, spec.jitter, size=3), 0.0, 1.0))
        vertical = bool(rng.integers(2))

        position = None
        while position is None:
            for _ in range(PLACEMENT_TRIES):
                x = int(rng.integers(0, size - extent + 1))
                y = int(rng.integers(0, size - extent + 1))
                if spec.allow_occlusion or not _overlaps(x, y, extent, placed):
                    position = (x, y)
                    break
            if position is None:
                if extent > spec.min_extent:
                    extent -= 1
                    continue
                position = (x, y)
                logger.debug(f"No free slot for a {SHAPES[class_id]} of extent {extent}; placing with overlap")

        placed.append(PlacedShape(class_id, position[0], position[1], extent, color, vertical))
    return placed


def shape_mask(shape: PlacedShape, image_size: int) -> Image.Image:
    """図形のマスク（モード 'L'、前景 255）を描く"""
    mask = Image.new('L', (image_size, image_size), 0)
    draw = ImageDraw.Draw(mask)
    x, y, s = shape.x, shape.y, shape.extent
    x1, y1 = x + s - 1, y + s - 1
    thick = max(2, s // 3)
    kind = shape.kind

    if kind == 'circle':
        draw.ellipse([x, y, x1, y1], fill=255)
    elif kind == 'square':
        draw.rectangle([x, y, x1, y1], fill=255)
    elif kind == 'triangle':
        draw.polygon([(x + (s - 1) / 2, y), (x, y1), (x1, y1)], fill=255)
    elif kind == 'ring':
        draw.ellipse([x, y, x1, y1], outline=255, width=max(2, s // 5))
    elif kind == 'cross':
        offset = (s - thick) // 2
        draw.rectangle([x + offset, y, x + offset + thick - 1, y1], fill=255)
        draw.rectangle([x, y + offset, x1, y + offset + thick - 1], fill=255)
    elif kind == 'bar':
        offset = (s - thick) // 2
        if shape.vertical:
            draw.rectangle([x + offset, y, x + offset + thick - 1, y1], fill=255)
        else:
            draw.rectangle([x, y + offset, x1, y + offset + thick - 1], fill=255)
    else:  # pragma: no cover
        raise ConfigError(f"Unknown shape kind: {kind}")
    return mask


def render_scene(spec: SceneSpec, layout: list[PlacedShape],
                 rng: np.random.Generator) -> tuple[np.ndarray, list[tuple[int, list[float]]]]:
    """配置を描画し、(uint8 画素 H×W×3, [(class_id, ピクセル bbox [x,y,w,h])]) を返す。

    背景は暗い灰色の一様色にガウスノイズを足したもの。

    bbox は図形マスク全体の外接矩形で、後から描いた図形に隠れた部分も含む。
    遮蔽ありの配置や、置き場所がなく重なりを許した配置では、見えている
    画素より大きいボックスになることがある。
    """
    size = spec.image_size
    background = float(rng.uniform(0.05, 0.25))
    canvas = Image.new('RGB', (size, size), tuple([int(round(background * 255))] * 3))

    annotations: list[tuple[int, list[float]]] = []
    for shape in layout:
        mask = shape_mask(shape, size)
        bbox = mask.getbbox()
        if bbox is None:  # pragma: no cover
            logger.warning(f"Empty mask for {shape.kind} at ({shape.x}, {shape.y}); skipping")
            continue
        fill = Image.new('RGB', (size, size), tuple(int(round(c * 255)) for c in shape.color))
        canvas = Image.composite(fill, canvas, mask)
        left, top, right, bottom = bbox
        annotations.append((shape.class_id, [float(left), float(top), float(right - left), float(bottom - top)]))

    pixels = np.asarray(canvas, dtype=np.float64) / 255.0
    if spec.noise > 0:
        pixels = pixels + rng.normal(0.0, spec.noise, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)
    return np.round(pixels * 255).astype(np.uint8), annotations
