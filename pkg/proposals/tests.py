import numpy as np
from django.test import SimpleTestCase

from boxops.boxes import cxcywh_to_xyxy, iou_giou_xyxy
from detlab.utils import derive_rng
from scenes.shapes import SceneSpec, render_scene, sample_layout
from .segmentation import segment_image
from .selective_search import hierarchical_grouping, propose_boxes


def flat_image(value=0.2, size=64):
    return np.full((size, size, 3), value, dtype=np.float32)


def square_scene(size=64):
    """平坦な背景に緑の正方形1個。正方形は x 12..31, y 20..39"""
    image = flat_image(size=size)
    image[20:40, 12:32] = (0.15, 0.8, 0.2)
    return image, np.array([12 / size, 20 / size, 32 / size, 40 / size])


def noisy_scene(seed=0):
    spec = SceneSpec(min_objects=4, max_objects=8, noise=0.05)
    rng = derive_rng(seed, 2, 0)
    pixels, _ = render_scene(spec, sample_layout(spec, rng), rng)
    return pixels.astype(np.float32) / 255.0


class SegmentationTests(SimpleTestCase):
    def test_uniform_image_is_one_segment(self):
        segments = segment_image(flat_image())
        self.assertEqual(segments.count, 1)
        self.assertTrue(np.all(segments.labels == 0))

    def test_square_on_flat_background(self):
        image, square = square_scene()
        segments = segment_image(image)
        self.assertEqual(segments.count, 2)
        inside = segments.labels[30, 22]
        self.assertNotEqual(inside, segments.labels[0, 0])
        ys, xs = np.nonzero(segments.labels == inside)
        box = np.array([xs.min() / 64, ys.min() / 64, (xs.max() + 1) / 64, (ys.max() + 1) / 64])
        iou, _ = iou_giou_xyxy(box, square)
        self.assertGreaterEqual(float(iou), 0.9)

    def test_labels_are_contiguous(self):
        segments = segment_image(noisy_scene())
        self.assertEqual(set(np.unique(segments.labels).tolist()), set(range(segments.count)))

    def test_count_non_increasing_in_scale(self):
        image = noisy_scene(1)
        counts = [segment_image(image, scale=scale).count for scale in (10, 100, 1000, 10000)]
        self.assertEqual(counts, sorted(counts, reverse=True))


class GroupingTests(SimpleTestCase):
    def test_one_merge_per_step(self):
        image = noisy_scene(2)
        segments = segment_image(image)
        regions = hierarchical_grouping(image.astype(np.float64), segments)
        # S 個の初期領域から S-1 回の併合で1つになる
        self.assertEqual(len(regions), 2 * segments.count - 1)
        self.assertEqual(regions[-1].size, 64 * 64)
        self.assertEqual([r.level for r in regions[segments.count:]], list(range(1, segments.count)))

    def test_proposals_are_region_boxes(self):
        image = noisy_scene(3)
        segments = segment_image(image)
        region_boxes = {
            tuple(np.round(np.array(r.bbox) / 64, 9))
            for r in hierarchical_grouping(image.astype(np.float64), segments)
        }
        for proposal in propose_boxes(image, top_k=30, seed=0):
            xyxy = tuple(np.round(cxcywh_to_xyxy(proposal.box), 9))
            self.assertIn(xyxy, region_boxes)


class ProposeBoxesTests(SimpleTestCase):
    def test_uniform_image_gives_full_image_box(self):
        proposals = propose_boxes(flat_image(), top_k=10)
        self.assertEqual(len(proposals), 1)
        np.testing.assert_allclose(proposals[0].box, (0.5, 0.5, 1.0, 1.0))

    def test_square_is_top_proposal(self):
        image, square = square_scene()
        top = propose_boxes(image, top_k=5)[0]
        iou, _ = iou_giou_xyxy(cxcywh_to_xyxy(top.box), square)
        self.assertGreaterEqual(float(iou), 0.9)

    def test_ranked_and_bounded(self):
        proposals = propose_boxes(noisy_scene(4), top_k=10, seed=5)
        self.assertLessEqual(len(proposals), 10)
        scores = [p.score for p in proposals]
        self.assertEqual(scores, sorted(scores, reverse=True))
        boxes = np.array([cxcywh_to_xyxy(p.box) for p in proposals])
        iou, _ = iou_giou_xyxy(boxes[:, None, :], boxes[None, :, :])
        off_diagonal = iou[~np.eye(len(boxes), dtype=bool)]
        self.assertTrue(np.all(off_diagonal <= 0.95))

    def test_deterministic(self):
        image = noisy_scene(5)
        self.assertEqual(propose_boxes(image, 10, seed=9), propose_boxes(image, 10, seed=9))

    def test_invalid_top_k(self):
        with self.assertRaises(ValueError):
            propose_boxes(flat_image(), top_k=0)
