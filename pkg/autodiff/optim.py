from __future__ import annotations

"""Adam オプティマイザ（関数版）。"""

from dataclasses import dataclass, field
import logging

import numpy as np

from detlab.exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass
class OptimState:
    """Adam のモーメントとステップ数。lr はスケジュールから書き換えられる"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimState) -> tuple[dict[str, np.ndarray], OptimState]:
    """バイアス補正付き Adam を1ステップ適用する。

    grads に含まれないパラメータ（凍結分）はそのまま返す。
    モーメントは初回に0で作る。

    Args:
        params: 名前→値
        grads: 名前→勾配（params と同形状）
        state: 直前の状態。インプレースで更新して返す

    Returns:
        (更新後のパラメータ, 状態)

    Raises:
        ShapeMismatchError: 勾配・モーメントの形状がパラメータと異なる場合
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    updated = dict(params)
    for name, grad in grads.items():
        if name not in params:
            raise ShapeMismatchError(f"Gradient for unknown parameter '{name}'")
        value = params[name]
        if grad.shape != value.shape:
            raise ShapeMismatchError(f"Gradient shape {grad.shape} != parameter shape {value.shape} for '{name}'")

        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        elif m.shape != value.shape or v.shape != value.shape:
            raise ShapeMismatchError(f"Optimizer moment shape {m.shape} != parameter shape {value.shape} for '{name}'")

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

        state.m[name] = m.astype(value.dtype, copy=False)
        state.v[name] = v.astype(value.dtype, copy=False)
        updated[name] = (value - step).astype(value.dtype, copy=False)

    return updated, state
