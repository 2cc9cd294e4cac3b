"""データセットマニフェスト（COCO形式JSON）の型と入出力。"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
import json
import logging
import math

import numpy as np
from PIL import Image

from boxops.boxes import pixel_xywh_to_cxcywh
from detlab.exceptions import ManifestError
from detlab.utils import read_json, write_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageEntry:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    """ピクセル単位の [x, y, w, h]。疑似ラベルには score が付く"""
    id: int
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]
    score: float | None = None

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]


@dataclass
class DatasetManifest:
    dataset_id: str
    split: str
    seed: int
    images: list[ImageEntry]
    annotations: list[Annotation]
    categories: list[dict]
    info: dict = field(default_factory=dict)
    # 画像ファイルの基準ディレクトリ（保存対象外）
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        self._by_image: dict[int, list[Annotation]] | None = None

    @property
    def image_ids(self) -> list[int]:
        return [image.id for image in self.images]

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def image(self, image_id: int) -> ImageEntry:
        for entry in self.images:
            if entry.id == image_id:
                return entry
        raise ManifestError(f"Unknown image id {image_id} in dataset {self.dataset_id}")

    def annotations_for(self, image_id: int) -> list[Annotation]:
        if self._by_image is None:
            by_image: dict[int, list[Annotation]] = {}
            for ann in self.annotations:
                by_image.setdefault(ann.image_id, []).append(ann)
            self._by_image = by_image
        return self._by_image.get(image_id, [])

    def targets_for(self, image_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(クラスID配列, 正規化 cxcywh (m,4)) を返す"""
        entry = self.image(image_id)
        anns = self.annotations_for(image_id)
        labels = np.array([a.category_id for a in anns], dtype=np.int64)
        boxes = np.array(
            [pixel_xywh_to_cxcywh(a.bbox, entry.width, entry.height) for a in anns], dtype=np.float64,
        ).reshape(-1, 4)
        return labels, boxes

    def load_pixels(self, image_id: int) -> np.ndarray:
        """画像を H×W×3 の float32（[0,1]）で読み込む"""
        if self.root is None:
            raise ManifestError(f"Dataset {self.dataset_id} has no root directory; cannot load images")
        entry = self.image(image_id)
        path = self.root / entry.file_name
        try:
            with Image.open(path) as img:
                rgb = img.convert('RGB')
                return np.asarray(rgb, dtype=np.float32) / 255.0
        except OSError as e:
            raise ManifestError(f"Cannot read image {image_id} at {path}: {e}") from e

    def to_dict(self) -> dict:
        annotations = []
        for ann in self.annotations:
            item = {
                'id': ann.id,
                'image_id': ann.image_id,
                'category_id': ann.category_id,
                'bbox': list(ann.bbox),
                'area': ann.area,
                'iscrowd': 0,
            }
            if ann.score is not None:
                item['score'] = ann.score
            annotations.append(item)
        return {
            'info': {**self.info, 'dataset_id': self.dataset_id, 'split': self.split, 'seed': self.seed},
            'images': [
                {'id': im.id, 'file_name': im.file_name, 'width': im.width, 'height': im.height}
                for im in self.images
            ],
            'annotations': annotations,
            'categories': self.categories,
        }


def manifest_from_dict(data: dict, root: Path | None = None) -> DatasetManifest:
    """辞書を検証してマニフェストにする。

    Raises:
        ManifestError: 形式エラー、画像IDの参照切れ、画像外のボックス
    """
    from .serializers import ManifestSerializer

    serializer = ManifestSerializer(data=data)
    if not serializer.is_valid():
        raise ManifestError(f"Invalid manifest: {json.dumps(serializer.errors, ensure_ascii=False)}")
    validated = serializer.validated_data

    info = dict(validated['info'])
    dataset_id = str(info.pop('dataset_id', 'dataset'))
    split = str(info.pop('split', 'unknown'))
    seed = int(info.pop('seed', 0))
    images = [ImageEntry(im['id'], im['file_name'], im['width'], im['height']) for im in validated['images']]
    annotations = [
        Annotation(a['id'], a['image_id'], a['category_id'], tuple(float(v) for v in a['bbox']), a.get('score'))
        for a in validated['annotations']
    ]
    categories = [
        {'id': c['id'], 'name': c['name'], 'supercategory': c['supercategory']}
        for c in validated['categories']
    ]
    return DatasetManifest(dataset_id, split, seed, images, annotations, categories, info, root)


def save_manifest(manifest: DatasetManifest, path: Path | str) -> Path:
    path = Path(path)
    write_json(path, manifest.to_dict())
    logger.info(f"Saved manifest {manifest.dataset_id} ({len(manifest.images)} images, "
                f"{len(manifest.annotations)} annotations) to {path}")
    return path


def load_manifest(path: Path | str, root: Path | str | None = None) -> DatasetManifest:
    """マニフェストを読み込む。画像の基準ディレクトリは既定でJSONと同じ場所"""
    path = Path(path)
    try:
        data = read_json(path)
    except json.JSONDecodeError as e:
        raise ManifestError(f"Malformed manifest JSON at {path}: {e}") from e
    except OSError as e:
        raise ManifestError(f"Cannot read manifest at {path}: {e}") from e
    if not isinstance(data, dict):
        raise ManifestError(f"Manifest at {path} must be a JSON object")
    return manifest_from_dict(data, Path(root) if root is not None else path.parent)


def subsample_dataset(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """シード付きシャッフルで ⌊fraction·N⌋ 枚を残す。

    残した画像の順序は元のマニフェストの順序を保つ。
    """
    if not 0 < fraction <= 1:
        raise ManifestError(f"fraction must be in (0, 1], got {fraction}")
    total = len(manifest.images)
    keep = math.floor(fraction * total + 1e-9)
    if keep == 0:
        raise ManifestError(f"fraction {fraction} of {total} images leaves an empty dataset")

    chosen = np.sort(np.random.default_rng(seed).permutation(total)[:keep])
    images = [manifest.images[i] for i in chosen]
    kept_ids = {im.id for im in images}
    annotations = [a for a in manifest.annotations if a.image_id in kept_ids]
    logger.debug(f"Subsampled {manifest.dataset_id}: {keep}/{total} images (fraction={fraction}, seed={seed})")
    return replace(
        manifest,
        dataset_id=f'{manifest.dataset_id}@{fraction:g}s{seed}',
        images=images,
        annotations=annotations,
        info={**manifest.info, 'subsample': {'fraction': fraction, 'seed': seed, 'parent': manifest.dataset_id}},
    )


def with_annotations(manifest: DatasetManifest, annotations: list[Annotation], *,
                     dataset_id: str, categories: list[dict] | None = None, info: dict | None = None) -> DatasetManifest:
    """同じ画像集合に別のアノテーション（疑似ラベルなど）を付けたマニフェスト"""
    image_ids = set(manifest.image_ids)
    for ann in annotations:
        if ann.image_id not in image_ids:
            raise ManifestError(f"annotation {ann.id} references missing image id {ann.image_id}")
    return replace(
        manifest,
        dataset_id=dataset_id,
        annotations=list(annotations),
        categories=categories if categories is not None else manifest.categories,
        info={**manifest.info, **(info or {})},
    )
