"""検出器の学習ループ（事前学習・教師・ファインチューニング共通）。"""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
import logging

import numpy as np

from autodiff.engine import Graph, forward_backward
from autodiff.optim import OptimState, adam_step
from detector.network import ModelParams, bind_parameters, forward_graph
from detlab.exceptions import NonFiniteError, StageError
from detlab.utils import derive_rng
from matching.costs import LossWeights
from matching.losses import match_and_loss
from matching.targets import PretrainTargetSet
from .config import Schedule

logger = logging.getLogger(__name__)

LOSS_TERMS = ('class', 'l1', 'giou', 'embed', 'total')


@dataclass
class TrainingSet:
    images: np.ndarray                 # (N, H, W, 3) float32
    targets: list[PretrainTargetSet]

    def __post_init__(self):
        if len(self.images) != len(self.targets):
            raise StageError(f"{len(self.images)} images but {len(self.targets)} target sets")
        if not len(self.targets):
            raise StageError('Training set is empty')

    def __len__(self) -> int:
        return len(self.targets)


def train_step(params: ModelParams, tensors: dict[str, np.ndarray], images: np.ndarray,
               targets: list[PretrainTargetSet], weights: LossWeights, state: OptimState, *,
               use_embedding: bool) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """1バッチの順伝播・ロス・逆伝播・Adam 更新"""
    graph = Graph(dtype=np.float32)
    nodes = bind_parameters(graph, params.with_tensors(tensors))
    out = forward_graph(graph, nodes, params.config, images)
    result = match_and_loss(graph, out, targets, weights, use_embedding=use_embedding)
    _, grads = forward_backward(graph, result.total)
    tensors, _ = adam_step(tensors, grads, state)
    return tensors, result.breakdown


def train_detector(params: ModelParams, data: TrainingSet, *, epochs: int, schedule: Schedule,
                   weights: LossWeights, use_embedding: bool, seed: int, label: str = 'train',
                   eval_hook: Callable[[ModelParams], dict] | None = None,
                   eval_every: int = 0) -> tuple[ModelParams, list[dict]]:
    """epochs 回学習したパラメータとエポックごとの記録を返す。

    凍結コンポーネント（params.frozen）は更新しない。
    エポック e のシャッフル順は (seed, e) だけで決まる。

    Raises:
        NonFiniteError: ロスや勾配に NaN/Inf が出た場合（epoch / step 付き）
    """
    state = OptimState(lr=schedule.base_lr)
    tensors = dict(params.tensors)
    history: list[dict] = []
    batch = schedule.batch_size

    for epoch in range(epochs):
        state.lr = schedule.lr_at(epoch, epochs)
        order = derive_rng(seed, epoch).permutation(len(data))
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        steps = 0
        for step, start in enumerate(range(0, len(data), batch)):
            idx = order[start:start + batch]
            try:
                tensors, breakdown = train_step(
                    params, tensors, data.images[idx], [data.targets[i] for i in idx], weights, state,
                    use_embedding=use_embedding,
                )
            except NonFiniteError as e:
                raise NonFiniteError(f"{label}: non-finite value at epoch {epoch + 1}, step {step + 1}: {e}",
                                     node_id=e.node_id, op=e.op, epoch=epoch + 1, step=step + 1) from e
            for name in LOSS_TERMS:
                sums[name] += breakdown[name]
            steps += 1
            logger.debug(f"{label} epoch {epoch + 1} step {step + 1}: loss={breakdown['total']:.5f}")

        entry = {'epoch': epoch + 1, 'lr': state.lr, **{name: sums[name] / steps for name in LOSS_TERMS}}
        if eval_hook is not None and eval_every and (epoch + 1) % eval_every == 0:
            entry['eval'] = eval_hook(params.with_tensors(tensors))
        history.append(entry)
        logger.info(
            f"{label} epoch {epoch + 1}/{epochs} lr={state.lr:g} loss={entry['total']:.4f} "
            f"(class={entry['class']:.4f} l1={entry['l1']:.4f} giou={entry['giou']:.4f} embed={entry['embed']:.4f})"
        )

    return params.with_tensors(tensors), history
