import numpy as np
from django.test import SimpleTestCase

from detlab.exceptions import DegenerateBoxError, NonFiniteError
from .boxes import (
    BoxCxCyWH, BoxXYXY, box_cost, convert_box, cxcywh_to_xyxy, giou, iou_giou_xyxy,
    pairwise_box_cost, pixel_xywh_to_cxcywh, xyxy_to_cxcywh,
)


def random_xyxy(rng, n):
    """面積が十分ある [0,1] 内のランダムボックス"""
    corners = rng.uniform(0.0, 1.0, size=(n, 2, 2))
    lo = corners.min(axis=1)
    hi = np.maximum(corners.max(axis=1), lo + 0.01)
    return np.clip(np.concatenate([lo, hi], axis=1), 0.0, 1.0)


class ConvertTests(SimpleTestCase):
    def test_full_image_box(self):
        self.assertEqual(convert_box(BoxCxCyWH(0.5, 0.5, 1.0, 1.0)), BoxXYXY(0.0, 0.0, 1.0, 1.0))

    def test_corner_arithmetic(self):
        self.assertEqual(convert_box(BoxCxCyWH(0.25, 0.25, 0.5, 0.5)), BoxXYXY(0.0, 0.0, 0.5, 0.5))
        self.assertEqual(convert_box(BoxXYXY(0.0, 0.0, 0.5, 0.5)), BoxCxCyWH(0.25, 0.25, 0.5, 0.5))

    def test_round_trip_random(self):
        boxes = random_xyxy(np.random.default_rng(0), 200)
        np.testing.assert_allclose(cxcywh_to_xyxy(xyxy_to_cxcywh(boxes)), boxes, atol=1e-6)

    def test_corners_clamped(self):
        np.testing.assert_allclose(cxcywh_to_xyxy([0.05, 0.95, 0.2, 0.2]), [0.0, 0.85, 0.15, 1.0])

    def test_non_finite_rejected(self):
        with self.assertRaises(NonFiniteError):
            cxcywh_to_xyxy([np.nan, 0.5, 0.1, 0.1])

    def test_pixel_box_to_normalized(self):
        np.testing.assert_allclose(pixel_xywh_to_cxcywh([16, 16, 32, 32], 64, 64), [0.5, 0.5, 0.5, 0.5])


class GiouTests(SimpleTestCase):
    def test_identical(self):
        self.assertEqual(giou(BoxXYXY(0.1, 0.2, 0.6, 0.9), BoxXYXY(0.1, 0.2, 0.6, 0.9)), (1.0, 1.0))

    def test_disjoint_diagonal(self):
        iou, g = giou(BoxXYXY(0, 0, 0.5, 0.5), BoxXYXY(0.5, 0.5, 1, 1))
        self.assertEqual(iou, 0.0)
        self.assertAlmostEqual(g, -0.5)

    def test_contained_half(self):
        iou, g = giou(BoxXYXY(0, 0, 1, 1), BoxXYXY(0, 0, 0.5, 1))
        self.assertAlmostEqual(iou, 0.5)
        self.assertAlmostEqual(g, 0.5)

    def test_mixed_formats(self):
        self.assertEqual(giou(BoxCxCyWH(0.5, 0.5, 1, 1), BoxXYXY(0, 0, 1, 1)), (1.0, 1.0))

    def test_zero_area_rejected(self):
        with self.assertRaises(DegenerateBoxError):
            giou(BoxXYXY(0.2, 0.2, 0.2, 0.5), BoxXYXY(0, 0, 1, 1))

    def test_properties_on_random_pairs(self):
        rng = np.random.default_rng(1)
        a = random_xyxy(rng, 500)
        b = random_xyxy(rng, 500)
        iou_ab, giou_ab = iou_giou_xyxy(a, b)
        iou_ba, giou_ba = iou_giou_xyxy(b, a)
        # 対称性はビット単位で成り立つ
        np.testing.assert_array_equal(giou_ab, giou_ba)
        np.testing.assert_array_equal(iou_ab, iou_ba)
        self.assertTrue(np.all(giou_ab <= iou_ab))
        self.assertTrue(np.all((iou_ab >= 0) & (iou_ab <= 1)))
        self.assertTrue(np.all((giou_ab > -1) & (giou_ab <= 1)))

        for s in (0.25, 0.5, 0.9):
            iou_s, giou_s = iou_giou_xyxy(a * s, b * s)
            np.testing.assert_allclose(iou_s, iou_ab, atol=1e-6)
            np.testing.assert_allclose(giou_s, giou_ab, atol=1e-6)


class BoxCostTests(SimpleTestCase):
    def test_identical_boxes_cost_nothing(self):
        l1, gc = box_cost(BoxCxCyWH(0.4, 0.5, 0.2, 0.3), BoxCxCyWH(0.4, 0.5, 0.2, 0.3))
        self.assertEqual(l1, 0.0)
        self.assertEqual(gc, 0.0)

    def test_shift_in_cx_only(self):
        l1, _ = box_cost(BoxCxCyWH(0.4, 0.5, 0.2, 0.3), BoxCxCyWH(0.5, 0.5, 0.2, 0.3))
        self.assertAlmostEqual(l1, 0.1)

    def test_giou_cost_range(self):
        rng = np.random.default_rng(2)
        pred = xyxy_to_cxcywh(random_xyxy(rng, 30))
        target = xyxy_to_cxcywh(random_xyxy(rng, 20))
        l1, gc = pairwise_box_cost(pred, target)
        self.assertEqual(l1.shape, (30, 20))
        self.assertTrue(np.all((gc >= 0) & (gc < 2)))
        single_l1, single_gc = box_cost(BoxCxCyWH(*target[3]), BoxCxCyWH(*pred[7]))
        self.assertAlmostEqual(l1[7, 3], single_l1)
        self.assertAlmostEqual(gc[7, 3], single_gc)

    def test_degenerate_pred_rejected(self):
        with self.assertRaises(DegenerateBoxError):
            box_cost(BoxCxCyWH(0.5, 0.5, 0.2, 0.2), BoxCxCyWH(0.5, 0.5, 0.0, 0.2))
