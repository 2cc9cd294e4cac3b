from collections import Counter
from pathlib import Path
import tempfile

import numpy as np
from django.test import SimpleTestCase

from detlab.exceptions import ConfigError, ManifestError
from detlab.utils import derive_rng, read_json, write_json
from .generator import MANIFEST_NAME, generate_dataset
from .manifest import Annotation, DatasetManifest, ImageEntry, load_manifest, subsample_dataset
from .shapes import PlacedShape, SceneSpec, render_scene, sample_layout, shape_mask


def _fake_manifest(count: int) -> DatasetManifest:
    """画像ファイルを持たないメモリ上のマニフェスト"""
    return DatasetManifest(
        dataset_id='fake', split='train', seed=0,
        images=[ImageEntry(i, f'images/{i:06d}.png', 64, 64) for i in range(1, count + 1)],
        annotations=[], categories=[{'id': 0, 'name': 'circle', 'supercategory': 'shape'}],
    )


class SceneSpecTests(SimpleTestCase):
    def test_invalid_ranges_rejected(self):
        with self.assertRaises(ConfigError):
            SceneSpec(image_size=16)
        with self.assertRaises(ConfigError):
            SceneSpec(min_objects=5, max_objects=3)
        with self.assertRaises(ConfigError):
            SceneSpec(num_classes=1)


class LayoutTests(SimpleTestCase):
    def test_mean_object_count(self):
        spec = SceneSpec(min_objects=2, max_objects=12)
        rng = np.random.default_rng(0)
        counts = [len(sample_layout(spec, rng)) for _ in range(2000)]
        self.assertLess(abs(np.mean(counts) - 7.0), 0.5)
        self.assertEqual(min(counts), 2)
        self.assertEqual(max(counts), 12)

    def test_class_balance(self):
        spec = SceneSpec(min_objects=1, max_objects=6)
        classes = Counter()
        for index in range(1000):
            for shape in sample_layout(spec, derive_rng(5, 1, index)):
                classes[shape.class_id] += 1
        expected = sum(classes.values()) / spec.num_classes
        for class_id in range(spec.num_classes):
            self.assertLess(abs(classes[class_id] - expected), 0.2 * expected)

    def test_no_overlap_without_occlusion(self):
        spec = SceneSpec(min_objects=3, max_objects=5)
        for index in range(50):
            layout = sample_layout(spec, derive_rng(1, 0, index))
            masks = [np.asarray(shape_mask(s, spec.image_size)) > 0 for s in layout]
            for i in range(len(masks)):
                for j in range(i + 1, len(masks)):
                    self.assertFalse(np.any(masks[i] & masks[j]))

    def test_sizes_within_range(self):
        spec = SceneSpec(min_objects=4, max_objects=8)
        for index in range(100):
            for shape in sample_layout(spec, derive_rng(2, 0, index)):
                self.assertGreaterEqual(shape.extent, spec.min_extent)
                self.assertLessEqual(shape.extent, spec.max_extent)


class RenderTests(SimpleTestCase):
    def test_single_object_box_is_rendered_extent(self):
        spec = SceneSpec(min_objects=1, max_objects=1, noise=0.0)
        rng = derive_rng(3, 1, 0)
        layout = sample_layout(spec, rng)
        pixels, objects = render_scene(spec, layout, rng)
        self.assertEqual(len(objects), 1)
        # ノイズなしなので最頻色が背景
        colors, counts = np.unique(pixels.reshape(-1, 3), axis=0, return_counts=True)
        background = colors[np.argmax(counts)]
        ys, xs = np.nonzero(np.any(pixels != background, axis=-1))
        x, y, w, h = objects[0][1]
        self.assertEqual((x, y, w, h), (xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1))

    def test_boxes_cover_their_shapes(self):
        spec = SceneSpec(min_objects=2, max_objects=12)
        for index in range(30):
            layout = sample_layout(spec, derive_rng(4, 0, index))
            for shape in layout:
                mask = np.asarray(shape_mask(shape, spec.image_size)) > 0
                left, top, right, bottom = shape_mask(shape, spec.image_size).getbbox()
                inside = mask[top:bottom, left:right].sum()
                # 図形の全画素がボックス内、ボックスは図形の外接矩形
                self.assertEqual(inside, mask.sum())
                self.assertTrue(mask[top, left:right].any() and mask[bottom - 1, left:right].any())
                self.assertTrue(mask[top:bottom, left].any() and mask[top:bottom, right - 1].any())

    def test_pixels_in_unit_range(self):
        spec = SceneSpec(noise=0.2)
        rng = derive_rng(6, 0, 0)
        pixels, _ = render_scene(spec, sample_layout(spec, rng), rng)
        self.assertEqual(pixels.dtype, np.uint8)
        self.assertEqual(pixels.shape, (64, 64, 3))

    def test_hidden_shape_keeps_its_full_box(self):
        spec = SceneSpec(allow_occlusion=True, noise=0.0)
        circle = PlacedShape(class_id=0, x=10, y=10, extent=8, color=(0.85, 0.15, 0.15))
        square = PlacedShape(class_id=1, x=8, y=8, extent=14, color=(0.15, 0.8, 0.2))
        covered, objects = render_scene(spec, [circle, square], derive_rng(7, 0, 0))
        alone, _ = render_scene(spec, [square], derive_rng(7, 0, 0))
        # 円は完全に隠れているが、ボックスはマスクの外接矩形のまま
        np.testing.assert_array_equal(covered, alone)
        left, top, right, bottom = shape_mask(circle, spec.image_size).getbbox()
        self.assertEqual(objects[0], (0, [float(left), float(top), float(right - left), float(bottom - top)]))


class DatasetIOTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_same_seed_is_byte_identical(self):
        spec = SceneSpec(min_objects=2, max_objects=5)
        generate_dataset(spec, 4, seed=7, out_dir=self.tmp / 'a')
        generate_dataset(spec, 4, seed=7, out_dir=self.tmp / 'b')
        for name in [MANIFEST_NAME] + [f'images/{i:06d}.png' for i in range(1, 5)]:
            self.assertEqual((self.tmp / 'a' / name).read_bytes(), (self.tmp / 'b' / name).read_bytes(), msg=name)

    def test_splits_are_disjoint(self):
        spec = SceneSpec()
        generate_dataset(spec, 1, seed=7, out_dir=self.tmp / 'train', split='train')
        generate_dataset(spec, 1, seed=7, out_dir=self.tmp / 'eval', split='eval')
        self.assertNotEqual(
            (self.tmp / 'train' / 'images/000001.png').read_bytes(),
            (self.tmp / 'eval' / 'images/000001.png').read_bytes(),
        )

    def test_round_trip(self):
        manifest = generate_dataset(SceneSpec(min_objects=1, max_objects=4), 3, seed=1, out_dir=self.tmp)
        loaded = load_manifest(self.tmp / MANIFEST_NAME)
        self.assertEqual(loaded, manifest)
        pixels = loaded.load_pixels(1)
        self.assertEqual(pixels.shape, (64, 64, 3))
        self.assertTrue(0.0 <= pixels.min() and pixels.max() <= 1.0)

    def test_dangling_image_id_named(self):
        generate_dataset(SceneSpec(min_objects=1, max_objects=1), 1, seed=1, out_dir=self.tmp)
        data = read_json(self.tmp / MANIFEST_NAME)
        data['annotations'][0]['image_id'] = 99
        write_json(self.tmp / 'broken.json', data)
        with self.assertRaisesMessage(ManifestError, 'missing image id 99'):
            load_manifest(self.tmp / 'broken.json')

    def test_out_of_range_box_rejected(self):
        generate_dataset(SceneSpec(min_objects=1, max_objects=1), 1, seed=1, out_dir=self.tmp)
        data = read_json(self.tmp / MANIFEST_NAME)
        data['annotations'][0]['bbox'] = [40.0, 40.0, 30.0, 10.0]
        write_json(self.tmp / 'broken.json', data)
        with self.assertRaises(ManifestError):
            load_manifest(self.tmp / 'broken.json')

    def test_malformed_json(self):
        (self.tmp / 'bad.json').write_text('{"images": [', encoding='utf-8')
        with self.assertRaises(ManifestError):
            load_manifest(self.tmp / 'bad.json')

    def test_pixel_box_normalized(self):
        manifest = _fake_manifest(1)
        manifest.annotations.append(Annotation(1, 1, 0, (16.0, 16.0, 32.0, 32.0)))
        labels, boxes = manifest.targets_for(1)
        np.testing.assert_array_equal(labels, [0])
        np.testing.assert_allclose(boxes, [[0.5, 0.5, 0.5, 0.5]])


class SubsampleTests(SimpleTestCase):
    def test_full_fraction_is_identity(self):
        manifest = _fake_manifest(37)
        self.assertEqual(subsample_dataset(manifest, 1.0, seed=3).image_ids, manifest.image_ids)

    def test_floor_arithmetic(self):
        self.assertEqual(len(subsample_dataset(_fake_manifest(400), 0.25, seed=0).images), 100)
        self.assertEqual(len(subsample_dataset(_fake_manifest(500), 0.05, seed=0).images), 25)

    def test_seeded_subsets(self):
        manifest = _fake_manifest(400)
        a = subsample_dataset(manifest, 0.1, seed=1).image_ids
        self.assertEqual(a, subsample_dataset(manifest, 0.1, seed=1).image_ids)
        self.assertNotEqual(a, subsample_dataset(manifest, 0.1, seed=2).image_ids)

    def test_empty_result_rejected(self):
        with self.assertRaises(ManifestError):
            subsample_dataset(_fake_manifest(10), 0.05, seed=0)
        with self.assertRaises(ManifestError):
            subsample_dataset(_fake_manifest(10), 0.0, seed=0)
