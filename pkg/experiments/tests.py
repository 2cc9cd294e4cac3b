from io import StringIO
from pathlib import Path
import json
import tempfile

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from detector.checkpoints import load_checkpoint
from detector.network import PredictionSet, init_model
from detlab.exceptions import ConfigError, NonFiniteError, StageError
from evaluation.metrics import GroundTruthSet, MetricsTable, evaluate_recall
from matching.targets import DETREG, DETREG_PSEUDO_BOX, SELF_TRAIN, SUPERVISED, TargetSources, build_targets
from scenes.generator import MANIFEST_NAME
from .config import (FROM_SCRATCH, SCHEMES, Schedule, apply_overrides, config_from_dict, default_config,
                     load_config, with_seed)
from .inference import evaluate_params, load_images
from .matrix import FAILED, OK, MatrixResult, MatrixRun, parse_axis, run_matrix
from .pseudo_labels import generate_pseudo_labels, select_pseudo_labels
from .records import RunRecord, load_record
from .reports import (FAIL, PASS, SKIP, gates_text, proposal_quality, quality_text, recall_gap_gate, trend_gates,
                      write_proposal_report)
from .stages import (EVALUATE, FINETUNE, FINETUNE_CHECKPOINT, FINETUNE_INIT_CHECKPOINT, GEN_DATA, PRETRAIN,
                     PRETRAIN_CHECKPOINT, PSEUDO_LABEL, TEACHER_CHECKPOINT, TRAIN_TEACHER, Workspace,
                     pipeline_stages, require_dataset, run_pipeline, run_stage, stage_key)
from .training import TrainingSet, train_detector

TINY = {
    'name': 'tiny',
    'scene': {'image_size': 32, 'num_classes': 2, 'max_objects': 2},
    'model': {'width': 16, 'ffn_width': 24, 'encoder_layers': 1, 'decoder_layers': 1,
              'num_queries': 4, 'embed_dim': 8},
    'schedule': {'pretrain_epochs': 1, 'finetune_epochs': 2, 'teacher_epochs': 2, 'batch_size': 4},
    'data': {'pretrain_images': 6, 'train_images': 6, 'eval_images': 4},
    'seeds': {'data': 3, 'model': 5, 'train': 7},
    'pseudo_count': 2,
    'pretrain_corpus': 'single',
}


def tiny_config(scheme=SELF_TRAIN, **overrides):
    config = config_from_dict({**TINY, 'scheme': scheme})
    if overrides:
        config = apply_overrides(config, {k.replace('__', '.'): v for k, v in overrides.items()})
    return config


def metrics_dict(ap, ap50=None, ap75=None):
    table = MetricsTable(ap=ap, ap50=ap if ap50 is None else ap50, ap75=ap if ap75 is None else ap75,
                         ap_small=None, ap_medium=ap, ap_large=None, ar1=ap, ar10=ap, ar_k=ap, k=4)
    return table.to_dict()


def prediction(logits, boxes):
    logits = np.asarray(logits, dtype=np.float32)
    return PredictionSet(logits=logits, boxes=np.asarray(boxes, dtype=np.float32),
                         embeddings=np.zeros((len(logits), 8), dtype=np.float32))


class ConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = default_config()
        self.assertEqual(config.scheme, SELF_TRAIN)
        self.assertEqual(config.schedule.pretrain_epochs, 20)
        self.assertEqual(config.schedule.finetune_epochs, 30)
        self.assertEqual(config.schedule.batch_size, 16)
        self.assertEqual(config.schedule.base_lr, 1e-3)
        self.assertEqual(config.pseudo_count, 10)
        self.assertEqual(config.model.image_size, 64)
        self.assertEqual(config.model.num_classes, 6)
        self.assertEqual(config.model.seed, config.seeds.model)

    def test_seeds_required(self):
        with self.assertRaisesRegex(ConfigError, 'seeds'):
            config_from_dict({'scheme': DETREG})

    def test_pseudo_count_cannot_exceed_queries(self):
        with self.assertRaisesRegex(ConfigError, 'pseudo_count'):
            config_from_dict({**TINY, 'scheme': SELF_TRAIN, 'pseudo_count': 5})

    def test_unknown_scheme_and_fields(self):
        with self.assertRaisesRegex(ConfigError, 'scheme'):
            config_from_dict({**TINY, 'scheme': 'mae'})
        with self.assertRaisesRegex(ConfigError, 'schedule.epochs'):
            config_from_dict({**TINY, 'scheme': SELF_TRAIN, 'schedule': {'epochs': 3}})

    def test_bad_values_report_field_path(self):
        with self.assertRaisesRegex(ConfigError, 'fraction'):
            tiny_config(fraction=0.0)
        with self.assertRaisesRegex(ConfigError, 'model.width'):
            tiny_config(model__width=18)
        with self.assertRaisesRegex(ConfigError, 'components'):
            tiny_config(components='encoder,neck')

    def test_hash_is_stable_across_loads(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'experiment.json'
            path.write_text(json.dumps({**TINY, 'scheme': DETREG}), encoding='utf-8')
            first = load_config(path)
            second = load_config(path)
        self.assertEqual(first.config_hash, second.config_hash)
        self.assertEqual(first, second)
        self.assertNotEqual(first.config_hash, apply_overrides(first, {'fraction': 0.5}).config_hash)

    def test_round_trip_through_dict(self):
        config = tiny_config(DETREG_PSEUDO_BOX, components='decoder', eval_every=1)
        self.assertEqual(config_from_dict(config.to_dict()), config)

    def test_malformed_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'broken.json'
            path.write_text('{"scheme": ', encoding='utf-8')
            with self.assertRaises(ConfigError):
                load_config(path)
            with self.assertRaises(ConfigError):
                load_config(Path(tmp) / 'missing.json')

    def test_components_are_normalized(self):
        config = tiny_config(components='encoder,backbone')
        self.assertEqual(config.components, 'backbone,encoder')
        self.assertEqual(config.component_set, frozenset({'backbone', 'encoder'}))

    def test_from_scratch(self):
        self.assertTrue(tiny_config(FROM_SCRATCH).from_scratch)
        self.assertTrue(tiny_config(components='none').from_scratch)
        self.assertFalse(tiny_config().from_scratch)

    def test_overrides(self):
        config = tiny_config(schedule__finetune_epochs=5, seeds__train=11)
        self.assertEqual(config.schedule.finetune_epochs, 5)
        self.assertEqual(config.seeds.train, 11)
        self.assertEqual(apply_overrides(config, {'fraction': None}), config)
        with self.assertRaises(ConfigError):
            apply_overrides(config, {'optimizer.lr': 0.1})

    def test_with_seed_keeps_data_seed(self):
        config = with_seed(tiny_config(), 2)
        self.assertEqual((config.seeds.data, config.seeds.model, config.seeds.train), (3, 2, 2))
        self.assertEqual(config.model.seed, 2)

    def test_pretrain_corpus(self):
        config = tiny_config()
        self.assertEqual((config.pretrain_scene.min_objects, config.pretrain_scene.max_objects), (1, 1))
        self.assertEqual(default_config().pretrain_scene.max_objects, 12)
        with self.assertRaisesRegex(ConfigError, 'pretrain_corpus'):
            tiny_config(pretrain_corpus='multi')


class ScheduleTests(SimpleTestCase):
    def test_step_drop(self):
        schedule = Schedule()
        self.assertEqual(schedule.drop_epoch(20), 16)
        self.assertEqual(schedule.lr_at(15, 20), 1e-3)
        self.assertAlmostEqual(schedule.lr_at(16, 20), 1e-4)
        self.assertAlmostEqual(schedule.lr_at(19, 20), 1e-4)
        self.assertEqual(schedule.drop_epoch(30), 24)

    def test_no_drop_when_fraction_is_one(self):
        schedule = Schedule(drop_fraction=1.0)
        self.assertEqual(schedule.lr_at(4, 5), 1e-3)


class PseudoLabelSelectionTests(SimpleTestCase):
    def test_drops_no_object_and_sorts(self):
        logits = [
            [0.0, 4.0, 0.0],   # クラス1（強い）
            [0.0, 0.0, 6.0],   # ∅
            [1.0, 0.0, 0.0],   # クラス0（弱い）
            [3.0, 0.0, 0.0],   # クラス0
        ]
        boxes = [[0.5, 0.5, 0.2, 0.2]] * 4
        selected = select_pseudo_labels(prediction(logits, boxes), 10)
        self.assertEqual([label for label, _, _ in selected], [1, 0, 0])
        scores = [score for _, _, score in selected]
        self.assertEqual(scores, sorted(scores, reverse=True))
        self.assertEqual(len(select_pseudo_labels(prediction(logits, boxes), 2)), 2)

    def test_oracle_teacher_recovers_every_object(self):
        gt = {
            1: GroundTruthSet.from_arrays([0, 1], [[0.25, 0.25, 0.2, 0.2], [0.7, 0.6, 0.3, 0.25]]),
            2: GroundTruthSet.from_arrays([1], [[0.5, 0.5, 0.4, 0.4]]),
        }
        proposals = {}
        for image_id, truth in gt.items():
            logits = np.full((4, 3), -5.0)
            logits[:, 2] = 5.0
            boxes = np.full((4, 4), 0.1)
            boxes[:, :2] = 0.5
            for q, (label, box) in enumerate(zip(truth.labels, truth.boxes)):
                logits[q] = -5.0
                logits[q, label] = 5.0
                boxes[q] = box
            selected = select_pseudo_labels(prediction(logits, boxes), 4)
            self.assertEqual(len(selected), len(truth.labels))
            proposals[image_id] = [box for _, box, _ in selected]
        self.assertAlmostEqual(evaluate_recall(proposals, gt, at=(10,))[10], 1.0, places=5)


class TrainingTests(SimpleTestCase):
    def setUp(self):
        self.config = tiny_config()
        rng = np.random.default_rng(0)
        self.images = rng.uniform(0, 1, size=(4, 32, 32, 3)).astype(np.float32)
        self.targets = [
            build_targets(SUPERVISED, TargetSources(boxes=np.array([[0.4, 0.5, 0.3, 0.2]]), labels=np.array([i % 2])), 4)
            for i in range(4)
        ]

    def train(self, params, images=None):
        data = TrainingSet(images=self.images if images is None else images, targets=self.targets)
        return train_detector(params, data, epochs=2, schedule=Schedule(batch_size=2), weights=self.config.loss_weights,
                              use_embedding=False, seed=1)

    def test_frozen_backbone_is_untouched(self):
        params = init_model(self.config.model, frozen=('backbone',))
        trained, history = self.train(params)
        self.assertEqual(len(history), 2)
        for name, value in params.tensors.items():
            if name.startswith('backbone.'):
                np.testing.assert_array_equal(trained.tensors[name], value)
        changed = [n for n, v in params.tensors.items() if not np.array_equal(trained.tensors[n], v)]
        self.assertTrue(changed)

    def test_training_is_deterministic(self):
        params = init_model(self.config.model)
        first, history_a = self.train(params)
        second, history_b = self.train(params)
        self.assertEqual(history_a, history_b)
        for name in first.tensors:
            np.testing.assert_array_equal(first.tensors[name], second.tensors[name])

    def test_non_finite_error_names_the_step(self):
        images = self.images.copy()
        images[:] = np.nan
        with self.assertRaises(NonFiniteError) as ctx:
            self.train(init_model(self.config.model), images=images)
        self.assertEqual((ctx.exception.epoch, ctx.exception.step), (1, 1))
        self.assertIsNotNone(ctx.exception.op)

    def test_mismatched_training_set(self):
        with self.assertRaises(StageError):
            TrainingSet(images=self.images[:3], targets=self.targets)


class PipelineTests(SimpleTestCase):
    """小さな設定でパイプライン全体を通す"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.ws = Workspace(Path(cls._tmp.name) / 'work')
        cls.config = tiny_config()
        cls.records = run_pipeline(cls.config, cls.ws)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def test_runs_every_stage(self):
        self.assertEqual(list(self.records), [GEN_DATA, TRAIN_TEACHER, PSEUDO_LABEL, PRETRAIN, FINETUNE, EVALUATE])
        table = self.records[EVALUATE].metrics_table
        for value in (table.ap, table.ap50, table.ap75):
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 1.0)
        self.assertGreaterEqual(table.ap50, table.ap75)
        self.assertTrue((self.ws.stage_dir(self.config, EVALUATE) / 'metrics.txt').exists())
        self.assertEqual(len(self.records[FINETUNE].epochs), 2)

    def test_completed_stage_is_reused(self):
        again = run_stage(self.config, EVALUATE, self.ws)
        self.assertEqual(again, self.records[EVALUATE])

    def test_pseudo_labels_are_written_once(self):
        path = self.ws.stage_dir(self.config, PSEUDO_LABEL) / MANIFEST_NAME
        before = path.read_bytes()
        corpus = require_dataset(self.config, self.ws, 'pretrain')
        teacher = self.ws.stage_dir(self.config, TRAIN_TEACHER) / TEACHER_CHECKPOINT
        manifest = generate_pseudo_labels(teacher, corpus, self.config.pseudo_count, path)
        self.assertEqual(path.read_bytes(), before)
        for image_id in manifest.image_ids:
            self.assertLessEqual(len(manifest.annotations_for(image_id)), self.config.pseudo_count)

    def test_checkpoint_handoff_is_exact(self):
        pretrained = load_checkpoint(self.ws.stage_dir(self.config, PRETRAIN) / PRETRAIN_CHECKPOINT)
        init = load_checkpoint(self.ws.stage_dir(self.config, FINETUNE) / FINETUNE_INIT_CHECKPOINT)
        for name, value in pretrained.tensors.items():
            np.testing.assert_array_equal(init.tensors[name], value)
        eval_split = require_dataset(self.config, self.ws, 'eval')
        self.assertEqual(evaluate_params(init, eval_split).to_dict(), self.records[PRETRAIN].metrics)

    def test_same_seeds_reproduce_in_another_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            other = Workspace(tmp)
            records = run_pipeline(self.config, other)
            self.assertEqual(records[EVALUATE].metrics, self.records[EVALUATE].metrics)
            for stage, name in ((PRETRAIN, PRETRAIN_CHECKPOINT), (FINETUNE, FINETUNE_CHECKPOINT)):
                self.assertEqual((other.stage_dir(self.config, stage) / name).read_bytes(),
                                 (self.ws.stage_dir(self.config, stage) / name).read_bytes())

    def test_from_scratch_needs_no_checkpoint(self):
        config = tiny_config(FROM_SCRATCH)
        self.assertEqual(pipeline_stages(config), [GEN_DATA, FINETUNE, EVALUATE])
        records = run_pipeline(config, self.ws)
        self.assertIsNotNone(records[EVALUATE].metrics)
        with self.assertRaises(StageError):
            run_stage(config, PRETRAIN, self.ws)

    def test_finetune_without_pretraining_fails(self):
        config = tiny_config(SUPERVISED)
        with self.assertRaisesRegex(StageError, 'pretrain'):
            run_stage(config, FINETUNE, self.ws)

    def test_evaluate_before_finetune_fails(self):
        config = tiny_config(fraction=0.5)
        with self.assertRaisesRegex(StageError, 'finetune'):
            run_stage(config, EVALUATE, self.ws)

    def test_encoder_and_decoder_loading_both_run(self):
        inits = {}
        for components in ('encoder', 'decoder'):
            config = tiny_config(components=components)
            self.assertEqual(stage_key(config, PRETRAIN), stage_key(self.config, PRETRAIN))
            records = run_pipeline(config, self.ws)
            self.assertIsNotNone(records[EVALUATE].metrics)
            inits[components] = load_checkpoint(self.ws.stage_dir(config, FINETUNE) / FINETUNE_INIT_CHECKPOINT)
        self.assertFalse(np.array_equal(inits['encoder'].tensors['encoder.0.self_q_weight'],
                                        inits['decoder'].tensors['encoder.0.self_q_weight']))

    def test_low_data_subset(self):
        config = tiny_config(fraction=0.5, eval_every=1)
        records = run_pipeline(config, self.ws)
        self.assertEqual(records[FINETUNE].metadata['train_images'], 3)
        self.assertEqual(load_record(self.ws.stage_dir(config, FINETUNE)).metadata, {'train_images': 3})
        self.assertEqual(set(records[FINETUNE].epochs[0]['eval']), {'AP', 'AP50', 'AP75'})

    def test_detreg_pretrains_a_binary_head(self):
        config = tiny_config(DETREG)
        records = run_pipeline(config, self.ws, through=PRETRAIN)
        self.assertIsNone(records[PRETRAIN].metrics)
        pretrained = load_checkpoint(self.ws.stage_dir(config, PRETRAIN) / PRETRAIN_CHECKPOINT)
        self.assertEqual(pretrained.config.num_classes, 1)
        self.assertEqual(records[PSEUDO_LABEL].metadata['source'], 'selective_search')
        records = run_pipeline(config, self.ws)
        init = load_checkpoint(self.ws.stage_dir(config, FINETUNE) / FINETUNE_INIT_CHECKPOINT)
        self.assertEqual(init.config.num_classes, 2)
        self.assertIsNotNone(records[EVALUATE].metrics)

    def test_images_match_the_model(self):
        images = load_images(require_dataset(self.config, self.ws, 'train'))
        self.assertEqual(images.shape, (6, 32, 32, 3))

    def test_proposal_quality(self):
        quality = proposal_quality(self.config, self.ws)
        self.assertEqual(set(quality), {'selective_search', 'pseudo_boxes'})
        for table in quality.values():
            self.assertEqual(table.k, 4)
            self.assertIsNotNone(table.ar10)
            self.assertTrue(0.0 <= table.ar10 <= 1.0)
        self.assertIn(recall_gap_gate(quality).status, (PASS, FAIL))

        path = write_proposal_report(quality, self.ws.reports_dir())
        saved = json.loads(path.read_text(encoding='utf-8'))
        self.assertEqual(saved['pseudo_boxes']['AR@10'], quality['pseudo_boxes'].ar10)
        self.assertEqual(saved['gate']['name'], 'proposal recall gap')
        self.assertIn('selective_search', quality_text(quality))

    def test_report_command_for_proposals(self):
        config_path = Path(self._tmp.name) / 'tiny.json'
        config_path.write_text(json.dumps({**TINY, 'scheme': SELF_TRAIN}), encoding='utf-8')
        out = StringIO()
        call_command('report', kind='proposals', config=str(config_path), work_dir=str(self.ws.root), stdout=out)
        self.assertIn('proposal recall gap', out.getvalue())
        self.assertTrue((self.ws.reports_dir() / 'proposal_quality.txt').exists())

    def test_proposal_quality_needs_a_teacher(self):
        with tempfile.TemporaryDirectory() as tmp:
            ws = Workspace(Path(tmp))
            run_stage(self.config, GEN_DATA, ws)
            with self.assertRaisesRegex(StageError, 'train_teacher'):
                proposal_quality(self.config, ws)


def fake_runner(failing=()):
    seen = []

    def runner(config, ws):
        seen.append(config)
        if config.scheme in failing:
            raise StageError(f'{config.scheme} exploded')
        ap = config.fraction * 0.5 + config.seeds.model * 0.01
        record = RunRecord(stage=EVALUATE, stage_key='k', config_hash=config.config_hash, metrics=metrics_dict(ap))
        return {EVALUATE: record}

    runner.seen = seen
    return runner


class MatrixTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.base = tiny_config()

    def tearDown(self):
        self._tmp.cleanup()

    def test_parse_axis(self):
        self.assertEqual(parse_axis('scheme'), ('scheme', SCHEMES))
        self.assertEqual(parse_axis('fraction=0.05,0.5'), ('fraction', (0.05, 0.5)))
        self.assertEqual(parse_axis('pseudo_count=5'), ('pseudo_count', (5,)))
        with self.assertRaises(ConfigError):
            parse_axis('optimizer')
        with self.assertRaises(ConfigError):
            parse_axis('fraction=half')

    def test_every_cell_and_seed_runs(self):
        runner = fake_runner()
        result = run_matrix(self.base, [parse_axis('scheme')], [1, 2, 3], Workspace(self.root), runner=runner)
        self.assertEqual(len(result.runs), 15)
        self.assertFalse(result.failures)
        self.assertEqual({c.seeds.data for c in runner.seen}, {3})
        self.assertEqual(sorted({c.seeds.model for c in runner.seen}), [1, 2, 3])

    def test_mean_and_sd_over_seeds(self):
        result = run_matrix(self.base, [('fraction', (0.5, 1.0))], [1, 2, 3], Workspace(self.root),
                            out_dir=self.root / 'out', runner=fake_runner())
        rows = {row['fraction']: row for row in result.summary_rows()}
        self.assertAlmostEqual(rows[0.5]['AP mean'], 0.27)
        self.assertAlmostEqual(rows[1.0]['AP mean'], 0.52)
        self.assertAlmostEqual(rows[1.0]['AP sd'], 0.01)
        self.assertEqual(rows[1.0]['seeds'], 3)
        for name in ('summary.json', 'summary.csv', 'summary.txt', 'runs.csv', 'fraction_curve.csv'):
            self.assertTrue((self.root / 'out' / name).exists(), name)
        self.assertIn('52.0 ± 1.0', (self.root / 'out' / 'summary.txt').read_text(encoding='utf-8'))

    def test_failures_are_recorded_and_skipped(self):
        result = run_matrix(self.base, [('scheme', (SELF_TRAIN, DETREG))], [1, 2], Workspace(self.root),
                            runner=fake_runner(failing=(DETREG,)))
        self.assertEqual(len(result.runs), 4)
        self.assertEqual([r.status for r in result.runs], [OK, OK, FAILED, FAILED])
        self.assertIn('exploded', result.failures[0].error)
        rows = {row['scheme']: row for row in result.summary_rows()}
        self.assertIsNone(rows[DETREG]['AP mean'])
        self.assertEqual(rows[DETREG]['failed'], 2)

    def test_invalid_cell_is_a_failure(self):
        result = run_matrix(self.base, [('pseudo_count', (2, 25))], [1], Workspace(self.root), runner=fake_runner())
        self.assertEqual([r.status for r in result.runs], [OK, FAILED])
        self.assertIn('pseudo_count', result.runs[1].error)

    def test_full_fraction_cell_matches_a_standalone_run(self):
        captured = fake_runner()
        run_matrix(self.base, [('fraction', (1.0,))], [2], Workspace(self.root), runner=captured)
        standalone = with_seed(self.base, 2)
        self.assertEqual(stage_key(captured.seen[0], FINETUNE), stage_key(standalone, FINETUNE))

    def test_summary_round_trip(self):
        result = run_matrix(self.base, [('scheme', (SELF_TRAIN,))], [1], Workspace(self.root), runner=fake_runner())
        self.assertEqual(MatrixResult.from_dict(result.to_dict()), result)


def synthetic_matrix(ap_by_cell, axes):
    runs = [MatrixRun(cell=dict(cell), seed=seed, status=OK, metrics=MetricsTable.from_dict(metrics_dict(ap)).row())
            for cell, ap in ap_by_cell for seed in (1, 2)]
    return MatrixResult(axes=axes, seeds=[1, 2], runs=runs)


class TrendGateTests(SimpleTestCase):
    def gate(self, result, name):
        return next(g for g in trend_gates(result) if g.name == name)

    def test_scheme_ordering(self):
        good = {SUPERVISED: 0.40, SELF_TRAIN: 0.35, DETREG_PSEUDO_BOX: 0.30, FROM_SCRATCH: 0.20, DETREG: 0.1}
        result = synthetic_matrix([({'scheme': s}.items(), ap) for s, ap in good.items()], ['scheme'])
        self.assertEqual(self.gate(result, 'scheme ordering').status, PASS)

        close = dict(good, **{FROM_SCRATCH: 0.34})
        result = synthetic_matrix([({'scheme': s}.items(), ap) for s, ap in close.items()], ['scheme'])
        self.assertEqual(self.gate(result, 'scheme ordering').status, FAIL)

    def test_gates_skip_without_axes(self):
        result = synthetic_matrix([({'fraction': 1.0}.items(), 0.3)], ['fraction'])
        gates = {g.name: g.status for g in trend_gates(result)}
        self.assertEqual(gates['scheme ordering'], SKIP)
        self.assertEqual(gates['low-data gain'], SKIP)
        self.assertEqual(gates['encoder vs decoder'], SKIP)
        self.assertEqual(gates['threshold consistency'], PASS)

    def test_low_data_gain(self):
        cells = [
            ({'scheme': SELF_TRAIN, 'fraction': 0.05}.items(), 0.20),
            ({'scheme': FROM_SCRATCH, 'fraction': 0.05}.items(), 0.05),
            ({'scheme': SELF_TRAIN, 'fraction': 0.5}.items(), 0.40),
            ({'scheme': FROM_SCRATCH, 'fraction': 0.5}.items(), 0.35),
        ]
        result = synthetic_matrix(cells, ['scheme', 'fraction'])
        self.assertEqual(self.gate(result, 'low-data gain').status, PASS)

    def test_encoder_vs_decoder_slack(self):
        within = synthetic_matrix([({'components': 'encoder'}.items(), 0.300),
                                   ({'components': 'decoder'}.items(), 0.304)], ['components'])
        self.assertEqual(self.gate(within, 'encoder vs decoder').status, PASS)
        beyond = synthetic_matrix([({'components': 'encoder'}.items(), 0.30),
                                   ({'components': 'decoder'}.items(), 0.31)], ['components'])
        self.assertEqual(self.gate(beyond, 'encoder vs decoder').status, FAIL)

    def test_threshold_consistency(self):
        run = MatrixRun(cell={}, seed=1, status=OK, metrics={'AP': 0.5, 'AP50': 0.4, 'AP75': 0.3})
        result = MatrixResult(axes=[], seeds=[1], runs=[run])
        self.assertEqual(self.gate(result, 'threshold consistency').status, FAIL)

    def test_text(self):
        result = synthetic_matrix([({'fraction': 1.0}.items(), 0.3)], ['fraction'])
        text = gates_text(trend_gates(result))
        self.assertIn('threshold consistency', text)
        self.assertIn(SKIP, text)


def recall_table(ar10):
    return MetricsTable(ap=0.0, ap50=0.0, ap75=0.0, ap_small=None, ap_medium=None, ap_large=None,
                        ar1=ar10, ar10=ar10, ar_k=ar10, k=10)


class RecallGapGateTests(SimpleTestCase):
    def test_pass(self):
        gate = recall_gap_gate({'selective_search': recall_table(0.2), 'pseudo_boxes': recall_table(0.6)})
        self.assertEqual(gate.status, PASS)
        self.assertIn('+0.400', gate.detail)

    def test_fail_when_gap_is_small(self):
        gate = recall_gap_gate({'selective_search': recall_table(0.4), 'pseudo_boxes': recall_table(0.6)})
        self.assertEqual(gate.status, FAIL)

    def test_fail_when_proposals_win(self):
        gate = recall_gap_gate({'selective_search': recall_table(0.7), 'pseudo_boxes': recall_table(0.1)})
        self.assertEqual(gate.status, FAIL)

    def test_skip_without_ground_truth(self):
        gate = recall_gap_gate({'selective_search': recall_table(None), 'pseudo_boxes': recall_table(None)})
        self.assertEqual(gate.status, SKIP)

    def test_report_files(self):
        quality = {'selective_search': recall_table(0.2), 'pseudo_boxes': recall_table(0.6)}
        with tempfile.TemporaryDirectory() as tmp:
            path = write_proposal_report(quality, tmp)
            saved = json.loads(path.read_text(encoding='utf-8'))
            text = (Path(tmp) / 'proposal_quality.txt').read_text(encoding='utf-8')
        self.assertEqual(saved['gate']['status'], PASS)
        self.assertEqual(saved['selective_search']['AR@10'], 0.2)
        self.assertIn('pseudo_boxes', text)
        self.assertIn('proposal recall gap', text)


class CommandTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.config_path = self.root / 'tiny.json'
        self.config_path.write_text(json.dumps({**TINY, 'scheme': SELF_TRAIN}), encoding='utf-8')

    def tearDown(self):
        self._tmp.cleanup()

    def call(self, name, **options):
        out = StringIO()
        call_command(name, config=str(self.config_path), work_dir=str(self.root / 'work'), stdout=out, **options)
        return out.getvalue()

    def test_gen_data(self):
        output = self.call('gen_data', eval_images=3)
        self.assertIn('完了', output)
        config = tiny_config(data__eval_images=3)
        self.assertEqual(len(require_dataset(config, Workspace(self.root / 'work'), 'eval').images), 3)

    def test_stage_error_becomes_command_error(self):
        with self.assertRaisesRegex(CommandError, 'gen_data'):
            self.call('train_teacher')

    def test_invalid_override(self):
        with self.assertRaises(CommandError):
            self.call('gen_data', fraction=2.0)

    def test_report_needs_a_summary(self):
        with self.assertRaises(CommandError):
            self.call('report', kind='matrix', summary=str(self.root / 'missing.json'))

    def test_matrix_and_report(self):
        summary = MatrixResult(
            axes=['components'], seeds=[1],
            runs=[MatrixRun(cell={'components': 'encoder'}, seed=1, status=OK, metrics=metrics_dict(0.3)),
                  MatrixRun(cell={'components': 'decoder'}, seed=1, status=OK, metrics=metrics_dict(0.2))],
        )
        path = self.root / 'summary.json'
        path.write_text(json.dumps(summary.to_dict()), encoding='utf-8')
        output = self.call('report', kind='matrix', summary=str(path))
        self.assertIn('encoder vs decoder', output)
        self.assertIn(PASS, output)
        self.assertTrue((self.root / 'gates.txt').exists())
