"""numpy 上の密テンソル逆伝播自動微分。

Graph はテープ方式: 演算は即時評価され、生成順に記録される。
生成順はそのままトポロジカル順になる（入力は必ず先に作られている）。

学習は float32、grad_check のオラクル用に float64 のグラフも作れる。
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence
import logging

import numpy as np

from detlab.exceptions import NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """ブロードキャストで広がった勾配を元の形状に畳み込む"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """グラフ上のノード。data は行優先の密配列"""

    __slots__ = ('graph', 'id', 'op', 'data', 'inputs', 'backward_fn', 'requires_grad', 'name')

    def __init__(self, graph: 'Graph', node_id: int, op: str, data: np.ndarray,
                 inputs: tuple['Tensor', ...], backward_fn, requires_grad: bool, name: str | None = None):
        self.graph = graph
        self.id = node_id
        self.op = op
        self.data = data
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover
        label = f" name={self.name}" if self.name else ''
        return f"Tensor(id={self.id}, op={self.op}, shape={self.shape}{label})"

    # 演算子は Graph のメソッドに委譲する
    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __rtruediv__(self, other):
        return self.graph.div(other, self)

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


class Graph:
    """演算を記録するテープ。

    record=False の場合は逆伝播情報を保持しない（評価専用、高速）。
    """

    def __init__(self, dtype=np.float32, record: bool = True):
        self.dtype = np.dtype(dtype)
        self.record = record
        self.nodes: list[Tensor] = []
        self.parameters: dict[str, Tensor] = {}
        self._next_id = 0

    # ---- ノード生成 ----

    def _emit(self, op: str, data: np.ndarray, inputs: tuple[Tensor, ...] = (),
              backward_fn=None, *, requires_grad: bool | None = None, name: str | None = None) -> Tensor:
        if data.dtype != self.dtype:
            data = data.astype(self.dtype)
        node_id = self._next_id
        self._next_id += 1
        if not np.isfinite(data).all():
            raise NonFiniteError(f"Non-finite value produced by node {node_id} ({op})", node_id=node_id, op=op)
        if requires_grad is None:
            requires_grad = self.record and any(t.requires_grad for t in inputs)
        if not requires_grad:
            backward_fn = None
            inputs = inputs if self.record else ()
        node = Tensor(self, node_id, op, data, inputs, backward_fn, requires_grad, name)
        if self.record:
            self.nodes.append(node)
        return node

    def parameter(self, name: str, value, trainable: bool = True) -> Tensor:
        """学習パラメータを登録する。trainable=False なら定数として扱う（凍結）"""
        data = np.array(value, dtype=self.dtype)
        node = self._emit('parameter', data, requires_grad=trainable and self.record, name=name)
        self.parameters[name] = node
        return node

    def constant(self, value) -> Tensor:
        return self._emit('constant', np.asarray(value, dtype=self.dtype), requires_grad=False)

    def _lift(self, value) -> Tensor:
        if isinstance(value, Tensor):
            if value.graph is not self:
                raise ShapeMismatchError('Tensor belongs to a different graph')
            return value
        return self.constant(value)

    # ---- 要素演算 ----

    def add(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return self._emit('add', a.data + b.data, (a, b), backward)

    def sub(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
        return self._emit('sub', a.data - b.data, (a, b), backward)

    def mul(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
        return self._emit('mul', a.data * b.data, (a, b), backward)

    def div(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)
        out = a.data / b.data

        def backward(g):
            ga = g / b.data
            return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)
        return self._emit('div', out, (a, b), backward)

    def neg(self, a) -> Tensor:
        a = self._lift(a)
        return self._emit('neg', -a.data, (a,), lambda g: (-g,))

    def abs(self, a) -> Tensor:
        a = self._lift(a)
        sign = np.sign(a.data)
        return self._emit('abs', np.abs(a.data), (a,), lambda g: (g * sign,))

    def maximum(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)
        pick_a = a.data >= b.data

        def backward(g):
            return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)
        return self._emit('maximum', np.maximum(a.data, b.data), (a, b), backward)

    def minimum(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)
        pick_a = a.data <= b.data

        def backward(g):
            return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)
        return self._emit('minimum', np.minimum(a.data, b.data), (a, b), backward)

    def relu(self, a) -> Tensor:
        a = self._lift(a)
        mask = a.data > 0
        return self._emit('relu', a.data * mask, (a,), lambda g: (g * mask,))

    def sigmoid(self, a) -> Tensor:
        a = self._lift(a)
        # exp のオーバーフローを避けるため符号で分岐
        x = a.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return self._emit('sigmoid', out, (a,), lambda g: (g * out * (1.0 - out),))

    # ---- 行列・正規化 ----

    def matmul(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeMismatchError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

        def backward(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        return self._emit('matmul', a.data @ b.data, (a, b), backward)

    def softmax(self, a, axis: int = -1) -> Tensor:
        a = self._lift(a)
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
        return self._emit('softmax', out, (a,), backward)

    def log_softmax(self, a, axis: int = -1) -> Tensor:
        a = self._lift(a)
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse

        def backward(g):
            return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
        return self._emit('log_softmax', out, (a,), backward)

    def layer_norm(self, x, gamma, beta, eps: float = 1e-5) -> Tensor:
        """最終軸に沿った LayerNorm"""
        x, gamma, beta = self._lift(x), self._lift(gamma), self._lift(beta)
        mu = x.data.mean(axis=-1, keepdims=True)
        centered = x.data - mu
        inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
        xhat = centered * inv_std
        n = x.shape[-1]

        def backward(g):
            gxhat = g * gamma.data
            gx = (inv_std / n) * (
                n * gxhat
                - gxhat.sum(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
            )
            return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)
        return self._emit('layer_norm', xhat * gamma.data + beta.data, (x, gamma, beta), backward)

    # ---- 縮約 ----

    def sum(self, a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        a = self._lift(a)
        shape = a.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return self._emit('sum', np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)

    def mean(self, a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        a = self._lift(a)
        if axis is None:
            count = a.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([a.shape[ax] for ax in axes]))
        total = self.sum(a, axis=axis, keepdims=keepdims)
        return self.mul(total, 1.0 / count)

    # ---- 形状操作 ----

    def gather(self, a, indices: Sequence[int] | np.ndarray, axis: int = 0) -> Tensor:
        """axis に沿って indices の行を取り出す（重複可）"""
        a = self._lift(a)
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeMismatchError(f"gather indices must be 1-D, got shape {idx.shape}")
        shape = a.shape

        def backward(g):
            ga = np.zeros(shape, dtype=g.dtype)
            np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
            return (ga,)
        return self._emit('gather', np.take(a.data, idx, axis=axis), (a,), backward)

    def concat(self, tensors: Iterable, axis: int = 0) -> Tensor:
        parts = tuple(self._lift(t) for t in tensors)
        sizes = [t.shape[axis] for t in parts]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))
        return self._emit('concat', np.concatenate([t.data for t in parts], axis=axis), parts, backward)

    def reshape(self, a, shape: tuple[int, ...]) -> Tensor:
        a = self._lift(a)
        original = a.shape
        return self._emit('reshape', a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))

    def swapaxes(self, a, axis1: int = -1, axis2: int = -2) -> Tensor:
        a = self._lift(a)
        return self._emit('swapaxes', np.swapaxes(a.data, axis1, axis2), (a,),
                          lambda g: (np.swapaxes(g, axis1, axis2),))


def forward_backward(graph: Graph, loss: Tensor) -> tuple[float, dict[str, np.ndarray]]:
    """loss ノードから逆伝播し、学習パラメータごとの勾配を返す。

    凍結パラメータと中間ノードの勾配は返さない。
    """
    if not graph.record:
        raise ShapeMismatchError('Graph was built with record=False; nothing to differentiate')
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeMismatchError(f"Loss node {loss.id} ({loss.op}) is not scalar: shape {loss.shape}")

    if loss.graph is not graph:
        raise ShapeMismatchError('Loss node belongs to a different graph')

    # 記録グラフでは nodes[i].id == i
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: loss.id + 1]):
        if node.backward_fn is None:
            continue
        g = grads.pop(node.id, None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, input_grads):
            if not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(
                    f"Non-finite gradient flowing from node {node.id} ({node.op}) into node {parent.id} ({parent.op})",
                    node_id=node.id, op=node.op,
                )
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg.astype(graph.dtype, copy=False)

    result: dict[str, np.ndarray] = {}
    for name, param in graph.parameters.items():
        if not param.requires_grad:
            continue
        g = grads.get(param.id)
        result[name] = g if g is not None else np.zeros_like(param.data)
    return float(loss.data), result


def evaluate(fn: Callable[[Graph, dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
             dtype=np.float64) -> float:
    """fn をパラメータ値で一度だけ評価する（逆伝播なし）"""
    graph = Graph(dtype=dtype, record=False)
    nodes = {name: graph.parameter(name, value, trainable=False) for name, value in params.items()}
    return float(fn(graph, nodes).data)
