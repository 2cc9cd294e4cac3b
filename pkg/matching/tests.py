from itertools import permutations
import math

import numpy as np
from django.test import SimpleTestCase
from scipy.optimize import linear_sum_assignment

from autodiff.engine import Graph
from autodiff.gradcheck import grad_check
from boxops.boxes import BoxCxCyWH, box_cost
from detector.embedding import crop_embed_many
from detector.network import ModelConfig, PredictionNodes, forward_graph, init_model
from detlab.exceptions import AssignmentError, TargetError
from .costs import LossWeights, matching_cost_matrix, softmax
from .hungarian import hungarian_assign
from .losses import assign_batch, downstream_loss, pretrain_loss, set_loss
from .targets import BINARY_OBJECT, TargetSources, build_targets

WEIGHTS = LossWeights()


def brute_force_minimum(cost):
    m, k = cost.shape
    perms = np.array(list(permutations(range(k), m)))
    return float(cost[np.arange(m), perms].sum(axis=1).min())


def random_boxes(rng, n):
    centre = rng.uniform(0.3, 0.7, size=(n, 2))
    size = rng.uniform(0.1, 0.4, size=(n, 2))
    return np.concatenate([centre, size], axis=1)


def prediction_nodes(graph, logits, boxes, embeddings):
    """任意の値を持つ予測ノード（バッチ1）"""
    return PredictionNodes(
        logits=graph.parameter('logits', np.asarray(logits)[None]),
        boxes=graph.parameter('boxes', np.asarray(boxes)[None]),
        embeddings=graph.parameter('embeddings', np.asarray(embeddings)[None]),
    )


class CostMatrixTests(SimpleTestCase):
    def test_perfect_match_costs_nothing(self):
        box = np.array([[0.5, 0.4, 0.2, 0.3]])
        probs = np.array([[0.0, 1.0, 0.0]])
        cost = matching_cost_matrix([1], box, probs, box, WEIGHTS)
        self.assertAlmostEqual(float(cost[0, 0]), 0.0)

    def test_uniform_logits(self):
        box = np.array([[0.5, 0.5, 0.3, 0.3]])
        probs = softmax(np.zeros((1, 7)))
        cost = matching_cost_matrix([2], box, probs, box, WEIGHTS)
        self.assertAlmostEqual(float(cost[0, 0]), 2 * (1 - 1 / 7), places=6)
        self.assertAlmostEqual(float(cost[0, 0]), 1.714, places=3)

    def test_rows_follow_targets(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 6, size=4)
        tboxes = random_boxes(rng, 4)
        probs = softmax(rng.normal(size=(9, 7)))
        pboxes = random_boxes(rng, 9)
        cost = matching_cost_matrix(labels, tboxes, probs, pboxes, WEIGHTS)
        perm = np.array([2, 0, 3, 1])
        permuted = matching_cost_matrix(labels[perm], tboxes[perm], probs, pboxes, WEIGHTS)
        np.testing.assert_array_equal(permuted, cost[perm])
        self.assertTrue(np.all(cost >= 0))


class HungarianTests(SimpleTestCase):
    def test_diagonal(self):
        result = hungarian_assign([[0, 1], [1, 0]])
        self.assertEqual(result.as_dict(), {0: 0, 1: 1})
        self.assertEqual(result.total_cost, 0.0)

    def test_single_row_argmin(self):
        self.assertEqual(hungarian_assign([[5, 2, 9]]).as_dict(), {0: 1})

    def test_ties_prefer_lowest_prediction(self):
        self.assertEqual(hungarian_assign([[3, 3, 3]]).as_dict(), {0: 0})

    def test_square_ties(self):
        self.assertEqual(hungarian_assign([[1, 1], [1, 1]]).as_dict(), {0: 0, 1: 1})
        self.assertEqual(hungarian_assign(np.ones((3, 3))).as_dict(), {0: 0, 1: 1, 2: 2})

    def test_random_5x8_against_brute_force(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            cost = rng.uniform(0, 10, size=(5, 8))
            result = hungarian_assign(cost)
            self.assertEqual(len(set(result.pred_for_target)), 5)
            self.assertAlmostEqual(result.total_cost, brute_force_minimum(cost), places=9)

    def test_all_small_shapes(self):
        rng = np.random.default_rng(7)
        for m in range(1, 7):
            for k in range(m, 9):
                for _ in range(5):
                    cost = rng.uniform(0, 1, size=(m, k))
                    result = hungarian_assign(cost)
                    self.assertAlmostEqual(result.total_cost, brute_force_minimum(cost), places=9)
                    rows, cols = linear_sum_assignment(cost)
                    self.assertAlmostEqual(result.total_cost, float(cost[rows, cols].sum()), places=9)

    def test_more_targets_than_predictions(self):
        with self.assertRaises(AssignmentError):
            hungarian_assign(np.zeros((3, 2)))

    def test_non_finite(self):
        with self.assertRaises(AssignmentError):
            hungarian_assign([[0.0, np.inf]])

    def test_empty(self):
        self.assertEqual(hungarian_assign(np.zeros((0, 4))).pred_for_target, ())


class BuildTargetsTests(SimpleTestCase):
    def test_padding(self):
        rng = np.random.default_rng(0)
        targets = build_targets('supervised', TargetSources(boxes=random_boxes(rng, 3), labels=[1, 2, 3]), k=25)
        entries = targets.entries
        self.assertEqual(len(entries), 25)
        self.assertEqual(targets.num_real, 3)
        self.assertTrue(all(e.label is None and e.box is None for e in entries[3:]))

    def test_detreg_entries_are_binary_with_embeddings(self):
        rng = np.random.default_rng(1)
        sources = TargetSources(boxes=random_boxes(rng, 4), scores=[0.1, 0.9, 0.5, 0.3],
                                embeddings=rng.normal(size=(4, 32)))
        targets = build_targets('detreg', sources, k=25, d=32)
        for entry in targets.entries[:4]:
            self.assertEqual(entry.label, BINARY_OBJECT)
            self.assertEqual(entry.embedding.shape, (32,))
        # スコア降順
        np.testing.assert_allclose(targets.boxes, np.asarray(sources.boxes)[[1, 2, 3, 0]])

    def test_self_train_uses_teacher_classes(self):
        rng = np.random.default_rng(2)
        sources = TargetSources(boxes=random_boxes(rng, 2), scores=[0.2, 0.8], labels=[4, 5])
        targets = build_targets('self_train', sources, k=10)
        self.assertEqual(targets.labels.tolist(), [5, 4])
        self.assertIsNone(targets.entries[0].embedding)

    def test_too_many_targets(self):
        rng = np.random.default_rng(3)
        with self.assertRaises(TargetError):
            build_targets('supervised', TargetSources(boxes=random_boxes(rng, 6), labels=[0] * 6), k=5)

    def test_sources_must_match_scheme(self):
        rng = np.random.default_rng(4)
        boxes = random_boxes(rng, 2)
        with self.assertRaises(TargetError):
            build_targets('detreg', TargetSources(boxes=boxes), k=5)
        with self.assertRaises(TargetError):
            build_targets('self_train', TargetSources(boxes=boxes), k=5)
        with self.assertRaises(TargetError):
            build_targets('supervised', TargetSources(boxes=boxes, labels=[0, 1], embeddings=np.zeros((2, 4))), k=5)


class LossTests(SimpleTestCase):
    k = 6
    num_logits = 4  # C=3 + ∅

    def _confident_logits(self, classes):
        logits = np.full((self.k, self.num_logits), -60.0)
        logits[np.arange(self.k), classes] = 60.0
        return logits

    def test_perfect_predictions_give_zero(self):
        rng = np.random.default_rng(0)
        tboxes = random_boxes(rng, 2)
        targets = build_targets('supervised', TargetSources(boxes=tboxes, labels=[2, 0]), k=self.k)
        classes = np.full(self.k, 3)
        classes[[1, 4]] = [2, 0]
        boxes = random_boxes(rng, self.k)
        boxes[[1, 4]] = tboxes
        graph = Graph(dtype=np.float64)
        out = prediction_nodes(graph, self._confident_logits(classes), boxes, np.zeros((self.k, 4)))
        assignments = assign_batch(out, [targets], WEIGHTS)
        self.assertEqual(assignments[0].as_dict(), {0: 1, 1: 4})
        result = downstream_loss(graph, out, [targets], assignments, WEIGHTS)
        self.assertAlmostEqual(result.value, 0.0, places=9)

    def test_all_no_object_uniform(self):
        targets = build_targets('supervised', TargetSources(boxes=np.zeros((0, 4)), labels=[]), k=self.k)
        graph = Graph(dtype=np.float64)
        out = prediction_nodes(graph, np.zeros((self.k, self.num_logits)), np.full((self.k, 4), 0.5),
                               np.zeros((self.k, 4)))
        result = downstream_loss(graph, out, [targets], assign_batch(out, [targets], WEIGHTS), WEIGHTS)
        expected = WEIGHTS.no_object_weight * WEIGHTS.class_weight * math.log(self.num_logits)
        self.assertAlmostEqual(result.value, expected, places=9)
        self.assertEqual(result.breakdown['l1'], 0.0)

    def test_single_pair_box_terms(self):
        target = np.array([[0.5, 0.5, 0.4, 0.4]])
        pred = np.array([0.55, 0.5, 0.4, 0.3])
        targets = build_targets('supervised', TargetSources(boxes=target, labels=[1]), k=self.k)
        classes = np.full(self.k, 3)
        classes[0] = 1
        boxes = np.full((self.k, 4), 0.5)
        boxes[0] = pred
        graph = Graph(dtype=np.float64)
        out = prediction_nodes(graph, self._confident_logits(classes), boxes, np.zeros((self.k, 4)))
        assignments = [hungarian_assign([[0.0] + [1.0] * (self.k - 1)])]
        result = downstream_loss(graph, out, [targets], assignments, WEIGHTS)
        l1, giou_cost = box_cost(BoxCxCyWH(*target[0]), BoxCxCyWH(*pred))
        self.assertAlmostEqual(l1, 0.15)
        self.assertAlmostEqual(result.value, WEIGHTS.l1_weight * l1 + WEIGHTS.giou_weight * giou_cost, places=9)

    def _random_case(self, seed, scheme='detreg'):
        rng = np.random.default_rng(seed)
        m = 3
        sources = TargetSources(boxes=random_boxes(rng, m), scores=rng.uniform(size=m),
                                embeddings=rng.normal(size=(m, 4)))
        targets = build_targets(scheme, sources, k=self.k, d=4)
        logits = rng.normal(size=(self.k, 2))
        return targets, logits, random_boxes(rng, self.k), rng.normal(size=(self.k, 4))

    def test_permutation_equivariance(self):
        for seed in range(20):
            targets, logits, boxes, emb = self._random_case(seed)
            perm = np.array([2, 0, 1])
            permuted = targets.permuted(perm)

            graph_a = Graph()
            out_a = prediction_nodes(graph_a, logits, boxes, emb)
            a = assign_batch(out_a, [targets], WEIGHTS)[0]
            result_a = pretrain_loss(graph_a, out_a, [targets], [a], WEIGHTS)

            graph_b = Graph()
            out_b = prediction_nodes(graph_b, logits, boxes, emb)
            b = assign_batch(out_b, [permuted], WEIGHTS)[0]
            result_b = pretrain_loss(graph_b, out_b, [permuted], [b], WEIGHTS)

            self.assertEqual(b.pred_for_target, tuple(a.pred_for_target[i] for i in perm))
            self.assertEqual(result_a.value, result_b.value)

    def test_unmatched_box_does_not_touch_box_terms(self):
        targets, logits, boxes, emb = self._random_case(5)
        graph = Graph(dtype=np.float64)
        out = prediction_nodes(graph, logits, boxes, emb)
        assignment = assign_batch(out, [targets], WEIGHTS)[0]
        base = pretrain_loss(graph, out, [targets], [assignment], WEIGHTS).breakdown

        unmatched = sorted(set(range(self.k)) - set(assignment.pred_for_target))[0]
        moved = boxes.copy()
        moved[unmatched] = [0.2, 0.8, 0.1, 0.1]
        emb_moved = emb.copy()
        emb_moved[unmatched] += 3.0
        graph = Graph(dtype=np.float64)
        out = prediction_nodes(graph, logits, moved, emb_moved)
        after = pretrain_loss(graph, out, [targets], [assignment], WEIGHTS).breakdown
        for term in ('l1', 'giou', 'embed'):
            self.assertEqual(after[term], base[term])

    def test_embedding_term_needs_embeddings(self):
        rng = np.random.default_rng(6)
        targets = build_targets('self_train', TargetSources(boxes=random_boxes(rng, 1), labels=[0]), k=self.k)
        graph = Graph()
        out = prediction_nodes(graph, rng.normal(size=(self.k, 2)), random_boxes(rng, self.k),
                               np.zeros((self.k, 4)))
        with self.assertRaises(TargetError):
            set_loss(graph, out, [targets], assign_batch(out, [targets], WEIGHTS), WEIGHTS, use_embedding=True)

    def test_downstream_equals_self_train_on_ground_truth(self):
        rng = np.random.default_rng(8)
        boxes = random_boxes(rng, 3)
        labels = [0, 2, 1]
        supervised = build_targets('supervised', TargetSources(boxes=boxes, labels=labels), k=self.k)
        self_train = build_targets('self_train', TargetSources(boxes=boxes, labels=labels), k=self.k)
        logits, pboxes = rng.normal(size=(self.k, self.num_logits)), random_boxes(rng, self.k)

        values = []
        for targets, loss_fn in ((supervised, downstream_loss), (self_train, pretrain_loss)):
            graph = Graph()
            out = prediction_nodes(graph, logits, pboxes, np.zeros((self.k, 4)))
            values.append(loss_fn(graph, out, [targets], assign_batch(out, [targets], WEIGHTS), WEIGHTS).value)
        self.assertEqual(values[0], values[1])

    def test_non_negative(self):
        for seed in range(10):
            targets, logits, boxes, emb = self._random_case(seed)
            graph = Graph()
            out = prediction_nodes(graph, logits, boxes, emb)
            result = pretrain_loss(graph, out, [targets], assign_batch(out, [targets], WEIGHTS), WEIGHTS)
            self.assertGreaterEqual(result.value, 0.0)

    def test_loss_gradient_wrt_predictions(self):
        targets, logits, boxes, emb = self._random_case(9)
        graph = Graph(dtype=np.float64)
        assignment = assign_batch(prediction_nodes(graph, logits, boxes, emb), [targets], WEIGHTS)

        def fn(graph, p):
            out = PredictionNodes(logits=p['logits'], boxes=p['boxes'], embeddings=p['embeddings'])
            return pretrain_loss(graph, out, [targets], assignment, WEIGHTS).total

        params = {'logits': logits[None], 'boxes': boxes[None], 'embeddings': emb[None]}
        self.assertLess(grad_check(fn, params, h=1e-6), 1e-5)


class DetectorGradientTests(SimpleTestCase):
    """検出器全体 + 集合ロスの勾配を中心差分と比較する（ランダムな20例）"""

    instances = 20
    queries = 4

    def _config(self, num_classes):
        return ModelConfig(image_size=32, patch_size=8, width=16, ffn_width=24, encoder_layers=1,
                           decoder_layers=1, num_queries=self.queries, num_classes=num_classes, embed_dim=8, seed=1)

    def _check(self, config, image, targets, loss_fn, seed):
        model = init_model(config)
        # 正規化前のスコアに定数を足しても softmax は不変なので key のバイアスの勾配は恒等的に0
        params = {n: t.astype(np.float64) for n, t in model.tensors.items() if not n.endswith('_k_bias')}
        fixed = {n: t.astype(np.float64) for n, t in model.tensors.items() if n.endswith('_k_bias')}

        graph = Graph(dtype=np.float64)
        nodes = {n: graph.parameter(n, v) for n, v in {**params, **fixed}.items()}
        assignments = assign_batch(forward_graph(graph, nodes, config, image), targets, WEIGHTS)

        def fn(graph, p):
            nodes = {**p, **{n: graph.constant(v) for n, v in fixed.items()}}
            out = forward_graph(graph, nodes, config, image)
            return loss_fn(graph, out, targets, assignments, WEIGHTS).total

        return grad_check(fn, params, h=1e-6, max_entries=2, seed=seed)

    def test_downstream_loss(self):
        config = self._config(3)
        for seed in range(self.instances):
            rng = np.random.default_rng(seed)
            image = rng.uniform(size=(1, 32, 32, 3))
            m = int(rng.integers(0, 4))
            sources = TargetSources(boxes=random_boxes(rng, m), labels=rng.integers(0, 3, size=m))
            targets = [build_targets('supervised', sources, k=self.queries)]
            self.assertLess(self._check(config, image, targets, downstream_loss, seed), 1e-3, msg=f'seed {seed}')

    def test_pretrain_loss_with_crop_embeddings(self):
        config = self._config(1)
        model = init_model(config)
        for seed in range(self.instances):
            rng = np.random.default_rng(100 + seed)
            image = rng.uniform(size=(1, 32, 32, 3))
            m = int(rng.integers(0, 4))
            boxes = random_boxes(rng, m)
            sources = TargetSources(boxes=boxes, scores=rng.uniform(size=m),
                                    embeddings=crop_embed_many(model, image[0], boxes))
            targets = [build_targets('detreg', sources, k=self.queries, d=config.embed_dim)]
            self.assertTrue(targets[0].has_embeddings)
            self.assertLess(self._check(config, image, targets, pretrain_loss, seed), 1e-3, msg=f'seed {seed}')
