import numpy as np
from django.test import SimpleTestCase

from boxops.boxes import BoxCxCyWH, xyxy_to_cxcywh
from detlab.exceptions import ManifestError
from .metrics import (IOU_THRESHOLDS, TABLE_COLUMNS, Detection, GroundTruthSet, MetricsTable,
                      evaluate_detections, evaluate_recall)
from .tables import csv_text, format_table, metrics_text


def box(x0, y0, x1, y1):
    return BoxCxCyWH(*(float(v) for v in xyxy_to_cxcywh([x0, y0, x1, y1])))


def random_case(seed, num_images=6, num_classes=3):
    """正解と、ノイズを加えた検出 + 誤検出"""
    rng = np.random.default_rng(seed)
    gt, dets = {}, []
    for image_id in range(1, num_images + 1):
        n = int(rng.integers(1, 5))
        centre = rng.uniform(0.25, 0.75, size=(n, 2))
        size = rng.uniform(0.08, 0.45, size=(n, 2))
        boxes = np.concatenate([centre, size], axis=1)
        labels = rng.integers(0, num_classes, size=n)
        gt[image_id] = GroundTruthSet.from_arrays(labels, boxes)
        for label, b in zip(labels, boxes):
            if rng.uniform() < 0.8:
                noisy = b + rng.normal(scale=0.02, size=4)
                noisy[2:] = np.abs(noisy[2:])
                dets.append(Detection(image_id, int(label), BoxCxCyWH(*noisy), float(rng.uniform(0.3, 1.0))))
        for _ in range(int(rng.integers(0, 3))):
            fp = np.concatenate([rng.uniform(0.2, 0.8, size=2), rng.uniform(0.05, 0.3, size=2)])
            dets.append(Detection(image_id, int(rng.integers(0, num_classes)), BoxCxCyWH(*fp),
                                  float(rng.uniform(0.0, 1.0))))
    return gt, dets


class EvaluateDetectionsTests(SimpleTestCase):
    def setUp(self):
        self.gt = {
            1: GroundTruthSet.from_arrays([0, 1], [box(0.1, 0.1, 0.4, 0.5), box(0.5, 0.5, 0.9, 0.8)]),
            2: GroundTruthSet.from_arrays([1], [box(0.2, 0.3, 0.6, 0.9)]),
        }

    def test_perfect_detector(self):
        dets = [
            Detection(image_id, int(label), BoxCxCyWH(*b), 1.0)
            for image_id, truth in self.gt.items()
            for label, b in zip(truth.labels, truth.boxes)
        ]
        table = evaluate_detections(dets, self.gt)
        self.assertEqual(table.ap, 1.0)
        self.assertEqual(table.ap50, 1.0)
        self.assertEqual(table.ap75, 1.0)
        self.assertEqual(table.ar_k, 1.0)

    def test_no_detections(self):
        table = evaluate_detections([], self.gt, k=5)
        self.assertEqual((table.ap, table.ap50, table.ap75), (0.0, 0.0, 0.0))
        self.assertEqual(table.ap_large, 0.0)
        self.assertEqual(table.ar1, 0.0)
        self.assertEqual(table.counts['detections'], 0)

    def test_hand_computed_precision_recall(self):
        # IoU(A, 正解) = 0.375 / 0.625 = 0.6
        gt = {7: GroundTruthSet.from_arrays([0], [box(0.0, 0.0, 1.0, 0.625)])}
        dets = [
            Detection(7, 0, box(0.0, 0.0, 1.0, 0.375), 0.9),
            Detection(7, 0, box(0.0, 0.75, 1.0, 1.0), 0.8),
        ]
        table = evaluate_detections(dets, gt)
        self.assertEqual(table.ap50, 1.0)
        self.assertEqual(table.ap75, 0.0)
        self.assertAlmostEqual(table.ap, 0.3, places=12)
        self.assertAlmostEqual(table.ap_large, 0.3, places=12)
        self.assertIsNone(table.ap_small)
        self.assertIsNone(table.ap_medium)

    def test_thresholds(self):
        self.assertEqual(len(IOU_THRESHOLDS), 10)
        self.assertEqual(IOU_THRESHOLDS[0], 0.5)
        self.assertEqual(IOU_THRESHOLDS[2], 0.6)
        self.assertEqual(IOU_THRESHOLDS[5], 0.75)
        self.assertEqual(IOU_THRESHOLDS[-1], 0.95)

    def test_unknown_image_id(self):
        with self.assertRaisesMessage(ManifestError, 'unknown image id 42'):
            evaluate_detections([Detection(42, 0, box(0.1, 0.1, 0.2, 0.2), 0.5)], self.gt)

    def test_size_strata(self):
        # 面積比 0.01（S）と 0.05（M）と 0.25（L）
        gt = {1: GroundTruthSet.from_arrays([0, 0, 0], [
            box(0.0, 0.0, 0.1, 0.1), box(0.2, 0.2, 0.45, 0.4), box(0.5, 0.5, 1.0, 1.0),
        ])}
        dets = [Detection(1, 0, box(0.5, 0.5, 1.0, 1.0), 0.9)]
        table = evaluate_detections(dets, gt)
        self.assertEqual(table.ap_large, 1.0)
        self.assertEqual(table.ap_small, 0.0)
        self.assertEqual(table.ap_medium, 0.0)

    def test_threshold_consistency(self):
        for seed in range(20):
            gt, dets = random_case(seed)
            table = evaluate_detections(dets, gt)
            self.assertGreaterEqual(table.ap50, table.ap)
            self.assertGreaterEqual(table.ap50, table.ap75)
            for value in table.row().values():
                if value is not None:
                    self.assertGreaterEqual(value, 0.0)
                    self.assertLessEqual(value, 1.0)

    def test_image_order_does_not_matter(self):
        gt, dets = random_case(3)
        baseline = evaluate_detections(dets, gt).to_dict()
        rng = np.random.default_rng(0)
        for _ in range(5):
            image_ids = list(gt)
            rng.shuffle(image_ids)
            shuffled_gt = {image_id: gt[image_id] for image_id in image_ids}
            shuffled = [d for image_id in image_ids for d in dets if d.image_id == image_id]
            self.assertEqual(evaluate_detections(shuffled, shuffled_gt).to_dict(), baseline)

    def test_deleting_false_positive_does_not_lower_ap(self):
        for seed in range(10):
            gt, dets = random_case(seed)
            base = evaluate_detections(dets, gt).ap
            for i, det in enumerate(dets):
                truth = gt[det.image_id]
                same_class = truth.boxes[truth.labels == det.class_id]
                if len(same_class) == 0:
                    pruned = dets[:i] + dets[i + 1:]
                    self.assertGreaterEqual(evaluate_detections(pruned, gt).ap, base - 1e-12)

    def test_adding_missed_box_does_not_lower_ap(self):
        gt, dets = random_case(5)
        for image_id, truth in gt.items():
            for label, b in zip(truth.labels, truth.boxes):
                # この画像・クラスの検出を消して見逃しにする
                missed = [d for d in dets if (d.image_id, d.class_id) != (image_id, int(label))]
                base = evaluate_detections(missed, gt).ap
                extra = missed + [Detection(image_id, int(label), BoxCxCyWH(*b), 1.0)]
                self.assertGreaterEqual(evaluate_detections(extra, gt).ap, base - 1e-12)

    def test_dict_round_trip(self):
        gt, dets = random_case(1)
        table = evaluate_detections(dets, gt, k=10)
        self.assertEqual(MetricsTable.from_dict(table.to_dict()), table)


class EvaluateRecallTests(SimpleTestCase):
    def setUp(self):
        self.a = box(0.1, 0.1, 0.4, 0.4)
        self.b = box(0.6, 0.6, 0.9, 0.9)
        self.gt = {1: GroundTruthSet.from_arrays([0, 1], [self.a, self.b])}

    def test_exact_boxes_give_full_recall(self):
        far = box(0.0, 0.9, 0.05, 1.0)
        recall = evaluate_recall({1: [far, self.b, self.a]}, self.gt, at=[3, 10])
        self.assertEqual(recall, {3: 1.0, 10: 1.0})

    def test_zero_overlap(self):
        recall = evaluate_recall({1: [box(0.45, 0.0, 0.55, 0.05)]}, self.gt, at=[1])
        self.assertEqual(recall[1], 0.0)

    def test_half_recall(self):
        recall = evaluate_recall({1: [self.a, box(0.45, 0.0, 0.55, 0.05), self.b]}, self.gt, at=[2])
        self.assertEqual(recall[2], 0.5)

    def test_non_decreasing_in_n(self):
        rng = np.random.default_rng(4)
        gt = {}
        proposals = {}
        for image_id in range(1, 6):
            gt[image_id] = GroundTruthSet.from_arrays(
                np.zeros(3), np.concatenate([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.4, (3, 2))], axis=1))
            proposals[image_id] = np.concatenate([rng.uniform(0.2, 0.8, (20, 2)),
                                                  rng.uniform(0.05, 0.5, (20, 2))], axis=1)
        recall = evaluate_recall(proposals, gt, at=range(1, 21))
        values = [recall[n] for n in range(1, 21)]
        self.assertEqual(values, sorted(values))

    def test_counts_must_be_positive(self):
        with self.assertRaises(ValueError):
            evaluate_recall({}, self.gt, at=[0])

    def test_no_ground_truth(self):
        gt = {1: GroundTruthSet.from_arrays([], np.zeros((0, 4)))}
        self.assertEqual(evaluate_recall({1: [self.a]}, gt, at=[1]), {1: None})


class TableFormatTests(SimpleTestCase):
    def test_column_layout(self):
        table = evaluate_detections([], {1: GroundTruthSet.from_arrays([0], [box(0.1, 0.1, 0.5, 0.5)])})
        header = metrics_text(table).splitlines()[0].split()
        self.assertEqual(tuple(header), TABLE_COLUMNS)

    def test_missing_values_and_alignment(self):
        rows = [{'scheme': 'self_train', 'AP': 0.25, 'AP50': None},
                {'scheme': 'detreg', 'AP': 0.125, 'AP50': 0.5}]
        lines = format_table(rows, ['AP', 'AP50'], label_columns=['scheme']).splitlines()
        self.assertEqual(len({len(line) for line in lines[:2]}), 1)
        self.assertIn('-', lines[2].split())
        self.assertTrue(lines[3].startswith('detreg '))
        self.assertTrue(lines[3].endswith('50.0'))

    def test_csv_blank_for_missing(self):
        text = csv_text([{'AP': 0.5, 'AP_S': None}], ['AP', 'AP_S'])
        self.assertEqual(text, 'AP,AP_S\n0.5,\n')
