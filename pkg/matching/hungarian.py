"""長方形コスト行列のハンガリアン法（ポテンシャル法）。

行（ターゲット m 個）を1行ずつ追加し、最短増加路でマッチングを広げる。
m ≤ k の長方形でもそのまま動く。内側の列走査は numpy でベクトル化している。
"""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from detlab.exceptions import AssignmentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Assignment:
    """σ: ターゲット j → 予測 pred_for_target[j]"""
    pred_for_target: tuple[int, ...]
    total_cost: float

    def as_dict(self) -> dict[int, int]:
        return dict(enumerate(self.pred_for_target))

    def pairs_by_prediction(self) -> list[tuple[int, int]]:
        """(予測, ターゲット) を予測インデックス順に並べたもの"""
        return sorted((q, j) for j, q in enumerate(self.pred_for_target))


def hungarian_assign(cost) -> Assignment:
    """総コスト最小の単射割り当てを返す。

    同じコストの候補は列（予測）番号の小さい方を先に選ぶ。

    Raises:
        AssignmentError: m > k、または非有限のコスト
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise AssignmentError(f"Cost matrix must be 2-D, got shape {cost.shape}")
    n_rows, n_cols = cost.shape
    if n_rows > n_cols:
        raise AssignmentError(f"More targets than predictions: m={n_rows} > k={n_cols}")
    if not np.isfinite(cost).all():
        raise AssignmentError('Cost matrix contains non-finite entries')
    if n_rows == 0:
        return Assignment(pred_for_target=(), total_cost=0.0)

    # 1始まりの添字（0 は番兵）
    u = np.zeros(n_rows + 1)
    v = np.zeros(n_cols + 1)
    row_of_col = np.zeros(n_cols + 1, dtype=np.int64)
    way = np.zeros(n_cols + 1, dtype=np.int64)

    for row in range(1, n_rows + 1):
        row_of_col[0] = row
        j0 = 0
        minv = np.full(n_cols + 1, np.inf)
        used = np.zeros(n_cols + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = np.flatnonzero(~used[1:]) + 1
            reduced = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = reduced < minv[free]
            minv[free[better]] = reduced[better]
            way[free[better]] = j0
            # argmin は最初の最小値（最小の列番号）を返す
            pick = int(np.argmin(minv[free]))
            j1 = int(free[pick])
            delta = minv[j1]

            used_cols = np.flatnonzero(used)
            u[row_of_col[used_cols]] += delta
            v[used_cols] -= delta
            minv[free] -= delta

            j0 = j1
            if row_of_col[j0] == 0:
                break

        while True:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
            if j0 == 0:
                break

    pred_for_target = [-1] * n_rows
    for col in range(1, n_cols + 1):
        if row_of_col[col]:
            pred_for_target[row_of_col[col] - 1] = col - 1
    total = float(sum(cost[j, q] for j, q in enumerate(pred_for_target)))
    return Assignment(pred_for_target=tuple(pred_for_target), total_cost=total)
