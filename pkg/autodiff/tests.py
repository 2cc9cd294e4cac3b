import numpy as np
from django.test import SimpleTestCase

from detlab.exceptions import NonFiniteError, NondeterminismError, ShapeMismatchError
from .engine import Graph, evaluate, forward_backward
from .gradcheck import grad_check
from .optim import OptimState, adam_step


def _weighted(graph, out, seed):
    """出力に固定の乱数重みを掛けて和を取る（スカラー化）"""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return graph.sum(graph.mul(out, w))


class ForwardBackwardTests(SimpleTestCase):
    def test_sum_gradient_is_ones(self):
        graph = Graph()
        p = graph.parameter('p', [1.0, 2.0, 3.0])
        loss, grads = forward_backward(graph, graph.sum(p))
        self.assertEqual(loss, 6.0)
        np.testing.assert_array_equal(grads['p'], [1.0, 1.0, 1.0])

    def test_dot_with_itself(self):
        graph = Graph()
        p = graph.parameter('p', [2.0, -1.0])
        loss, grads = forward_backward(graph, graph.sum(p * p))
        self.assertEqual(loss, 5.0)
        np.testing.assert_allclose(grads['p'], [4.0, -2.0])

    def test_relu_gradient_masks_negative_inputs(self):
        graph = Graph()
        p = graph.parameter('p', [-1.0, 0.5, 2.0])
        _, grads = forward_backward(graph, graph.sum(graph.relu(p)))
        np.testing.assert_array_equal(grads['p'], [0.0, 1.0, 1.0])

    def test_frozen_parameter_gets_no_gradient(self):
        graph = Graph()
        a = graph.parameter('a', [1.0, 2.0])
        b = graph.parameter('b', [3.0, 4.0], trainable=False)
        _, grads = forward_backward(graph, graph.sum(a * b))
        self.assertEqual(set(grads), {'a'})
        np.testing.assert_allclose(grads['a'], [3.0, 4.0])

    def test_unused_parameter_gets_zero_gradient(self):
        graph = Graph()
        a = graph.parameter('a', [1.0])
        graph.parameter('unused', np.ones((2, 2)))
        _, grads = forward_backward(graph, graph.sum(a))
        np.testing.assert_array_equal(grads['unused'], np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        graph = Graph()
        p = graph.parameter('p', [1.0, 2.0])
        with self.assertRaises(ShapeMismatchError):
            forward_backward(graph, p * 2.0)

    def test_non_finite_value_reports_node(self):
        graph = Graph()
        p = graph.parameter('p', [1.0, 0.0])
        with np.errstate(divide='ignore'):
            with self.assertRaises(NonFiniteError) as ctx:
                graph.div(1.0, p)
        self.assertEqual(ctx.exception.op, 'div')
        self.assertIsNotNone(ctx.exception.node_id)

    def test_float32_training_path(self):
        graph = Graph()
        p = graph.parameter('p', np.ones((2, 3)))
        loss = graph.mean(graph.sigmoid(p @ np.ones((3, 1))))
        _, grads = forward_backward(graph, loss)
        self.assertEqual(loss.data.dtype, np.float32)
        self.assertEqual(grads['p'].dtype, np.float32)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(4, 5)).astype(np.float32)
        x = rng.normal(size=(6, 4)).astype(np.float32)

        def run():
            graph = Graph()
            wn = graph.parameter('w', w)
            out = graph.softmax(graph.constant(x) @ wn)
            return forward_backward(graph, _weighted(graph, out, 9))

        loss_a, grads_a = run()
        loss_b, grads_b = run()
        self.assertEqual(loss_a, loss_b)
        np.testing.assert_array_equal(grads_a['w'], grads_b['w'])

    def test_gradient_of_sum_is_sum_of_gradients(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            value = rng.normal(size=(3, 4))

            def f(graph, p):
                return _weighted(graph, graph.sigmoid(p), trial)

            def g(graph, p):
                return _weighted(graph, graph.softmax(p), 1000 + trial)

            grads = []
            for fn in (f, g, lambda graph, p: graph.add(f(graph, p), g(graph, p))):
                graph = Graph(dtype=np.float64)
                p = graph.parameter('p', value)
                grads.append(forward_backward(graph, fn(graph, p))[1]['p'])
            np.testing.assert_allclose(grads[2], grads[0] + grads[1], rtol=1e-12, atol=1e-12)


class GradCheckTests(SimpleTestCase):
    def test_affine_function_is_exact(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        params = {'w': rng.normal(size=(3, 2)), 'b': rng.normal(size=(2,))}

        def fn(graph, p):
            return graph.sum(graph.constant(x) @ p['w'] + p['b'])

        self.assertLess(grad_check(fn, params), 1e-9)

    def test_two_layer_perceptron(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 3))
        y = rng.normal(size=(4, 2))
        params = {
            'layer1.weight': rng.normal(size=(3, 8)) * 0.5,
            'layer1.bias': rng.normal(size=(8,)) * 0.1,
            'layer2.weight': rng.normal(size=(8, 2)) * 0.5,
            'layer2.bias': np.zeros(2),
        }

        def fn(graph, p):
            hidden = graph.sigmoid(graph.constant(x) @ p['layer1.weight'] + p['layer1.bias'])
            out = hidden @ p['layer2.weight'] + p['layer2.bias']
            diff = out - y
            return graph.mean(diff * diff)

        self.assertLess(grad_check(fn, params, h=1e-3), 1e-3)

    def test_softmax_cross_entropy_head(self):
        rng = np.random.default_rng(2)
        features = rng.normal(size=(6, 5))
        labels = rng.integers(0, 4, size=6)
        params = {'head.weight': rng.normal(size=(5, 4)), 'head.bias': np.zeros(4)}

        def fn(graph, p):
            logp = graph.log_softmax(graph.constant(features) @ p['head.weight'] + p['head.bias'])
            flat = graph.reshape(logp, (24,))
            picked = graph.gather(flat, np.arange(6) * 4 + labels)
            return -graph.mean(picked)

        self.assertLess(grad_check(fn, params, h=1e-5), 1e-5)

    def test_nondeterministic_function_detected(self):
        calls = {'count': 0}

        def fn(graph, p):
            calls['count'] += 1
            return graph.sum(p['x'] * float(calls['count']))

        with self.assertRaises(NondeterminismError):
            grad_check(fn, {'x': np.ones(2)})

    def test_sampled_entries(self):
        rng = np.random.default_rng(4)
        params = {'w': rng.normal(size=(20, 20))}

        def fn(graph, p):
            return _weighted(graph, graph.sigmoid(p['w']), 5)

        self.assertLess(grad_check(fn, params, h=1e-6, max_entries=10), 1e-5)


class OpGradientTests(SimpleTestCase):
    """各演算の解析勾配を float64 の中心差分と比較する（ランダム入力で100回）"""

    trials = 100

    def _check_op(self, build, shapes, seed):
        rng = np.random.default_rng(seed)
        for trial in range(self.trials):
            params = {f'x{i}': rng.normal(size=shape) for i, shape in enumerate(shapes)}

            def fn(graph, p):
                return _weighted(graph, build(graph, *(p[f'x{i}'] for i in range(len(shapes)))), trial)

            err = grad_check(fn, params, h=1e-6)
            self.assertLess(err, 1e-5, msg=f'trial {trial}')

    def test_matmul_with_broadcast(self):
        self._check_op(lambda g, a, b: a @ b, [(3, 4), (2, 4, 2)], 10)

    def test_add_sub_mul(self):
        self._check_op(lambda g, a, b: (a + b) * a - b, [(2, 3), (3,)], 11)

    def test_div(self):
        self._check_op(lambda g, a, b: a / (g.mul(b, b) + 1.0), [(2, 3), (2, 3)], 12)

    def test_relu_and_abs(self):
        self._check_op(lambda g, a: g.relu(a) + g.abs(a), [(3, 3)], 13)

    def test_minimum_maximum(self):
        self._check_op(lambda g, a, b: g.maximum(a, b) + g.minimum(a, b) * a, [(2, 4), (2, 4)], 14)

    def test_sigmoid(self):
        self._check_op(lambda g, a: g.sigmoid(a), [(2, 5)], 15)

    def test_softmax_rows(self):
        self._check_op(lambda g, a: g.softmax(a, axis=-1), [(3, 4)], 16)

    def test_log_softmax(self):
        self._check_op(lambda g, a: g.log_softmax(a, axis=-1), [(3, 4)], 17)

    def test_layer_norm(self):
        self._check_op(lambda g, a, gamma, beta: g.layer_norm(a, gamma, beta), [(3, 5), (5,), (5,)], 18)

    def test_reductions(self):
        self._check_op(lambda g, a: g.concat([g.sum(a, axis=0), g.mean(a, axis=0)]), [(3, 4)], 19)

    def test_gather_with_repeats(self):
        self._check_op(lambda g, a: g.gather(a, [2, 0, 2], axis=1), [(2, 3)], 20)

    def test_concat_reshape_swapaxes(self):
        self._check_op(
            lambda g, a, b: g.swapaxes(g.reshape(g.concat([a, b], axis=1), (2, 3, 2)), 1, 2),
            [(3, 2), (3, 2)], 21,
        )


class Float32GradientTests(SimpleTestCase):
    """学習と同じ float32 グラフの解析勾配を float64 の中心差分と比較する"""

    trials = 20
    h = 1e-6

    def _check_op(self, build, shapes, seed):
        rng = np.random.default_rng(seed)
        for trial in range(self.trials):
            params = {f'x{i}': rng.normal(size=shape).astype(np.float32) for i, shape in enumerate(shapes)}

            def fn(graph, p):
                return _weighted(graph, build(graph, *(p[f'x{i}'] for i in range(len(shapes)))), trial)

            graph = Graph(dtype=np.float32)
            _, grads = forward_backward(graph, fn(graph, {n: graph.parameter(n, v) for n, v in params.items()}))

            params64 = {n: v.astype(np.float64) for n, v in params.items()}
            for name, value in params64.items():
                self.assertEqual(grads[name].dtype, np.float32)
                numeric = np.zeros_like(value)
                for index in np.ndindex(value.shape):
                    plus, minus = value.copy(), value.copy()
                    plus[index] += self.h
                    minus[index] -= self.h
                    numeric[index] = (evaluate(fn, {**params64, name: plus})
                                      - evaluate(fn, {**params64, name: minus})) / (2.0 * self.h)
                np.testing.assert_allclose(grads[name], numeric, rtol=1e-3, atol=1e-4,
                                           err_msg=f'{name} trial {trial}')

    def test_matmul_with_broadcast(self):
        self._check_op(lambda g, a, b: a @ b, [(3, 4), (2, 4, 2)], 30)

    def test_add_sub_mul_div(self):
        self._check_op(lambda g, a, b: (a + b) * a - b / (g.mul(b, b) + 1.0), [(2, 3), (2, 3)], 31)

    def test_relu_abs_minimum_maximum(self):
        self._check_op(lambda g, a, b: g.relu(a) + g.abs(b) + g.maximum(a, b) - g.minimum(a, b) * a,
                       [(2, 4), (2, 4)], 32)

    def test_sigmoid_softmax_log_softmax(self):
        self._check_op(lambda g, a: g.concat([g.sigmoid(a), g.softmax(a, axis=-1), g.log_softmax(a, axis=-1)]),
                       [(3, 4)], 33)

    def test_layer_norm(self):
        self._check_op(lambda g, a, gamma, beta: g.layer_norm(a, gamma, beta), [(3, 5), (5,), (5,)], 34)

    def test_reductions_gather_reshape(self):
        self._check_op(
            lambda g, a: g.swapaxes(g.reshape(g.gather(g.concat([g.sum(a, axis=0), g.mean(a, axis=0)]),
                                                       [3, 0, 3, 1], axis=0), (2, 2)), 0, 1),
            [(3, 4)], 35,
        )


class AdamTests(SimpleTestCase):
    def test_zero_gradients_leave_params_unchanged(self):
        params = {'w': np.array([1.0, -2.0], dtype=np.float32)}
        updated, state = adam_step(params, {'w': np.zeros(2, dtype=np.float32)}, OptimState(lr=0.1))
        np.testing.assert_array_equal(updated['w'], params['w'])
        self.assertEqual(state.step, 1)

    def test_first_step_is_learning_rate_sized(self):
        params = {'p': np.array(1.0)}
        updated, _ = adam_step(params, {'p': np.array(1.0)}, OptimState(lr=0.1))
        self.assertAlmostEqual(float(updated['p']), 0.9, places=6)

    def test_quadratic_converges(self):
        params = {'x': np.array(0.0)}
        state = OptimState(lr=0.05)
        for _ in range(500):
            grads = {'x': 2.0 * (params['x'] - 3.0)}
            params, state = adam_step(params, grads, state)
        self.assertLess(abs(float(params['x']) - 3.0), 0.05)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            adam_step({'w': np.zeros(3)}, {'w': np.zeros(2)}, OptimState())

    def test_frozen_params_pass_through(self):
        params = {'a': np.ones(2), 'frozen': np.ones(2)}
        updated, state = adam_step(params, {'a': np.ones(2)}, OptimState(lr=0.1))
        np.testing.assert_array_equal(updated['frozen'], np.ones(2))
        self.assertNotIn('frozen', state.m)
