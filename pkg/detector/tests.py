from dataclasses import replace
from pathlib import Path
import math
import tempfile

import numpy as np
from django.test import SimpleTestCase, override_settings

from autodiff.engine import Graph, forward_backward
from autodiff.optim import OptimState, adam_step
from boxops.boxes import BoxCxCyWH
from detlab.exceptions import CheckpointError, ConfigError, DegenerateBoxError
from .checkpoints import load_checkpoint, resolve_components, save_checkpoint
from .embedding import crop_embed
from .network import (
    ModelConfig, bind_parameters, component_of, forward, forward_graph, init_model,
    parameter_count, parameter_shapes,
)

SMALL = ModelConfig(image_size=32, patch_size=8, width=16, ffn_width=24, encoder_layers=1,
                    decoder_layers=1, num_queries=5, num_classes=3, embed_dim=8, seed=3)


def random_images(count, size=64, seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(count, size, size, 3)).astype(np.float32)


class InitTests(SimpleTestCase):
    def test_same_seed_bit_identical(self):
        a = init_model(ModelConfig(seed=5))
        b = init_model(ModelConfig(seed=5))
        self.assertEqual(list(a.tensors), list(b.tensors))
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_parameter_count_closed_form(self):
        for config in (ModelConfig(), SMALL):
            params = init_model(config)
            self.assertEqual(params.count(), parameter_count(config))
        # 既定構成: backbone 16512, encoder 2x33472, decoder 2x50240, queries 1600, heads 2795
        self.assertEqual(parameter_count(ModelConfig()), 16512 + 2 * 33472 + 2 * 50240 + 1600 + 2795)

    def test_xavier_bounds(self):
        params = init_model(ModelConfig())
        for name, tensor in params.tensors.items():
            self.assertTrue(np.isfinite(tensor).all(), name)
            if tensor.ndim == 2:
                limit = math.sqrt(6.0 / sum(tensor.shape))
                self.assertLessEqual(float(np.abs(tensor).max()), limit, name)
            elif name.endswith('gamma'):
                self.assertTrue(np.all(tensor == 1.0))
            else:
                self.assertTrue(np.all(tensor == 0.0))

    def test_every_name_has_a_component(self):
        for name in parameter_shapes(ModelConfig()):
            self.assertIn(component_of(name), ('backbone', 'encoder', 'decoder', 'queries', 'heads'))

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            ModelConfig(embed_dim=2)
        with self.assertRaises(ConfigError):
            ModelConfig(image_size=60)


class ForwardTests(SimpleTestCase):
    def test_output_contract(self):
        config = ModelConfig()
        predictions = forward(init_model(config), random_images(2))
        self.assertEqual(len(predictions), 2)
        for pred in predictions:
            self.assertEqual(pred.logits.shape, (25, 7))
            self.assertEqual(pred.boxes.shape, (25, 4))
            self.assertEqual(pred.embeddings.shape, (25, 32))
            self.assertTrue(np.all((pred.boxes > 0) & (pred.boxes < 1)))
            np.testing.assert_allclose(pred.probabilities.sum(axis=-1), 1.0, atol=1e-5)

    def test_deterministic(self):
        params = init_model(SMALL)
        images = random_images(1, size=32)
        a = forward(params, images)[0]
        b = forward(params, images)[0]
        np.testing.assert_array_equal(a.logits, b.logits)
        np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_batch_matches_single(self):
        params = init_model(SMALL)
        images = random_images(3, size=32, seed=1)
        batched = forward(params, images)
        single = forward(params, images[1])[0]
        np.testing.assert_allclose(batched[1].logits, single.logits, rtol=1e-5, atol=1e-6)


class CropEmbedTests(SimpleTestCase):
    def setUp(self):
        self.params = init_model(ModelConfig())
        self.image = random_images(1, seed=2)[0]

    def test_deterministic_unit_vector(self):
        box = BoxCxCyWH(0.4, 0.5, 0.3, 0.2)
        a = crop_embed(self.params, self.image, box)
        b = crop_embed(self.params, self.image, box)
        np.testing.assert_array_equal(a, b)
        self.assertEqual(a.shape, (32,))
        self.assertAlmostEqual(float(np.linalg.norm(a)), 1.0, places=5)

    def test_degenerate_crop(self):
        with self.assertRaises(DegenerateBoxError):
            crop_embed(self.params, self.image, BoxCxCyWH(0.5, 0.5, 1 / 64, 1 / 64))

    def test_unchanged_after_training_with_frozen_backbone(self):
        box = BoxCxCyWH(0.3, 0.3, 0.25, 0.25)
        before = crop_embed(self.params, self.image, box)
        params = self.params
        backbone_before = params.component('backbone')
        state = OptimState(lr=1e-2)
        for _ in range(3):
            graph = Graph()
            out = forward_graph(graph, bind_parameters(graph, params), params.config, self.image)
            loss = graph.mean(out.boxes) + graph.mean(graph.softmax(out.logits))
            _, grads = forward_backward(graph, loss)
            self.assertFalse(any(component_of(n) == 'backbone' for n in grads))
            tensors, state = adam_step(params.tensors, grads, state)
            params = params.with_tensors(tensors)
        for name, value in backbone_before.items():
            self.assertEqual(float(np.abs(params.tensors[name] - value).max()), 0.0)
        np.testing.assert_array_equal(before, crop_embed(params, self.image, box))


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.path = Path(self._tmp.name) / 'model.ckpt'
        self.params = init_model(SMALL)

    def tearDown(self):
        self._tmp.cleanup()

    def test_round_trip_bit_identical(self):
        save_checkpoint(self.params, self.path, metadata={'scheme': 'detreg', 'epochs': 2})
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.config, SMALL)
        self.assertEqual(loaded.metadata['scheme'], 'detreg')
        for name, value in self.params.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[name], value)

    def test_handoff_reproduces_outputs(self):
        save_checkpoint(self.params, self.path)
        images = random_images(1, size=32, seed=4)
        before = forward(self.params, images)[0]
        after = forward(load_checkpoint(self.path, frozen=()), images)[0]
        np.testing.assert_array_equal(before.logits, after.logits)
        np.testing.assert_array_equal(before.embeddings, after.embeddings)

    def test_filtered_load(self):
        trained = self.params.with_tensors({n: t + 1.0 for n, t in self.params.tensors.items()})
        save_checkpoint(trained, self.path)
        loaded = load_checkpoint(self.path, components={'encoder'}, seed=11)
        fresh = init_model(replace(SMALL, seed=11))
        for name, value in loaded.tensors.items():
            if component_of(name) == 'encoder':
                np.testing.assert_array_equal(value, trained.tensors[name])
            else:
                np.testing.assert_array_equal(value, fresh.tensors[name])

    def test_presets(self):
        self.assertEqual(resolve_components('encoder'), {'backbone', 'encoder'})
        self.assertEqual(resolve_components('decoder'), {'backbone', 'decoder', 'queries', 'heads'})
        self.assertEqual(resolve_components('none'), set())
        self.assertEqual(resolve_components('encoder,queries'), {'encoder', 'queries'})
        with self.assertRaises(CheckpointError):
            resolve_components({'encoder', 'neck'})

    def test_class_head_reinitialized_on_arity_change(self):
        binary = init_model(replace(SMALL, num_classes=1))
        save_checkpoint(binary, self.path)
        loaded = load_checkpoint(self.path, config=SMALL)
        np.testing.assert_array_equal(loaded.tensors['heads.class.weight'], self.params.tensors['heads.class.weight'])
        np.testing.assert_array_equal(loaded.tensors['heads.box.weight'], binary.tensors['heads.box.weight'])

    def test_truncated_payload_names_tensor(self):
        save_checkpoint(self.params, self.path)
        blob = self.path.read_bytes()
        self.path.write_bytes(blob[:-4])
        last = list(self.params.tensors)[-1]
        with self.assertRaisesMessage(CheckpointError, last):
            load_checkpoint(self.path)

    def test_unsupported_version_rejected_at_save(self):
        with override_settings(DETLAB_CHECKPOINT_VERSION=99):
            with self.assertRaisesMessage(CheckpointError, 'DETLAB_CHECKPOINT_VERSION=99'):
                save_checkpoint(self.params, self.path)
        self.assertFalse(self.path.exists())

    def test_version_mismatch_on_load(self):
        save_checkpoint(self.params, self.path)
        blob = self.path.read_bytes()
        self.assertIn(b'"version": 1', blob)
        self.path.write_bytes(blob.replace(b'"version": 1', b'"version": 7', 1))
        with self.assertRaisesMessage(CheckpointError, 'version 7'):
            load_checkpoint(self.path)

    def test_shape_mismatch_against_config(self):
        save_checkpoint(self.params, self.path)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path, config=replace(SMALL, width=20))
