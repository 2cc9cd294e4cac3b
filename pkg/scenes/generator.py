"""合成データセットの生成。"""
from __future__ import annotations

from pathlib import Path
import io
import logging

from PIL import Image

from detlab.utils import derive_rng, digest, ensure_dir, write_bytes_atomic
from .manifest import Annotation, DatasetManifest, ImageEntry, save_manifest
from .shapes import SHAPES, SceneSpec, render_scene, sample_layout

logger = logging.getLogger(__name__)

# 分割ごとのシード系列。同じ seed でも分割が違えば画像は重ならない
SPLIT_KEYS = {
    'pretrain': 0,
    'train': 1,
    'eval': 2,
}

MANIFEST_NAME = 'manifest.json'


def split_key(split: str) -> int:
    if split in SPLIT_KEYS:
        return SPLIT_KEYS[split]
    return int(digest(split, length=8), 16)


def categories_for(spec: SceneSpec) -> list[dict]:
    return [{'id': c, 'name': SHAPES[c], 'supercategory': 'shape'} for c in range(spec.num_classes)]


def image_file_name(image_id: int) -> str:
    return f'images/{image_id:06d}.png'


def encode_png(pixels) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format='PNG')
    return buffer.getvalue()


def generate_dataset(spec: SceneSpec, count: int, seed: int, out_dir: Path | str, *,
                     split: str = 'train', dataset_id: str | None = None) -> DatasetManifest:
    """count 枚の画像とマニフェストを out_dir に書き出す。

    画像 i の乱数は (seed, split, i) から派生させるので、
    (spec, count, seed, split) でバイト単位まで決まる。

    Raises:
        ValueError: count < 1
        OSError: 出力先に書き込めない場合
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out_dir = ensure_dir(out_dir)
    key = split_key(split)
    dataset_id = dataset_id or f'{split}-{seed}-{digest(spec.to_dict(), length=8)}'

    images: list[ImageEntry] = []
    annotations: list[Annotation] = []
    for index in range(count):
        rng = derive_rng(seed, key, index)
        layout = sample_layout(spec, rng)
        pixels, objects = render_scene(spec, layout, rng)

        image_id = index + 1
        file_name = image_file_name(image_id)
        write_bytes_atomic(out_dir / file_name, encode_png(pixels))
        images.append(ImageEntry(image_id, file_name, spec.image_size, spec.image_size))
        for class_id, bbox in objects:
            annotations.append(Annotation(len(annotations) + 1, image_id, class_id, tuple(bbox)))

        if (index + 1) % 500 == 0:
            logger.info(f"Generated {index + 1}/{count} images for {dataset_id}")

    manifest = DatasetManifest(
        dataset_id=dataset_id,
        split=split,
        seed=seed,
        images=images,
        annotations=annotations,
        categories=categories_for(spec),
        info={'scene': spec.to_dict()},
        root=out_dir,
    )
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info(f"Dataset {dataset_id}: {count} images, {len(annotations)} objects")
    return manifest
