"""float64 の中心差分による勾配チェック。"""
from __future__ import annotations

from typing import Callable
import logging

import numpy as np

from detlab.exceptions import NondeterminismError
from .engine import Graph, Tensor, evaluate, forward_backward

logger = logging.getLogger(__name__)

LossFn = Callable[[Graph, dict[str, Tensor]], Tensor]


def analytic_gradients(fn: LossFn, params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """float64 グラフで fn を評価し、解析勾配を返す"""
    graph = Graph(dtype=np.float64)
    nodes = {name: graph.parameter(name, value) for name, value in params.items()}
    return forward_backward(graph, fn(graph, nodes))


def grad_check(fn: LossFn, params: dict[str, np.ndarray], h: float = 1e-3, *,
               max_entries: int | None = None, seed: int = 0) -> float:
    """解析勾配と中心差分勾配の最大相対誤差を返す。

    相対誤差は |a - n| / max(|a|, |n|, 1e-8)。

    Args:
        fn: (graph, {name: Tensor}) -> スカラーの loss Tensor
        params: チェックするパラメータ（float64 に変換して評価する）
        h: 差分幅
        max_entries: パラメータごとに調べる要素数の上限（None なら全要素）
        seed: 要素の抽出に使うシード

    Raises:
        NondeterminismError: 同じ入力で fn の値が変わった場合
    """
    params64 = {name: np.array(value, dtype=np.float64) for name, value in params.items()}

    base, grads = analytic_gradients(fn, params64)
    again = evaluate(fn, params64)
    if base != again:
        raise NondeterminismError(f"Loss changed between identical evaluations: {base!r} != {again!r}")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in params64.items():
        flat_count = value.size
        if max_entries is not None and flat_count > max_entries:
            entries = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
        else:
            entries = np.arange(flat_count)

        for flat_index in entries:
            index = np.unravel_index(int(flat_index), value.shape)
            shifted = dict(params64)

            plus = value.copy()
            plus[index] += h
            shifted[name] = plus
            f_plus = evaluate(fn, shifted)

            minus = value.copy()
            minus[index] -= h
            shifted[name] = minus
            f_minus = evaluate(fn, shifted)

            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(grads[name][index])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
                logger.debug(f"grad_check: {name}{index} analytic={analytic:.6g} numeric={numeric:.6g} rel={rel:.3g}")

    return worst
