"""実験マトリクス（スキーム × 疑似ラベル数 × 転移コンポーネント × データ割合 × コーパス × シード）。

各セルは run_pipeline を1回呼ぶだけ。ステージのキーが同じなら成果物は共有される。
失敗したセルは記録して次に進む。
"""
from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
import logging

import numpy as np

from detlab.exceptions import ConfigError
from detlab.utils import ensure_dir, write_bytes_atomic, write_json
from evaluation.metrics import TABLE_COLUMNS
from evaluation.tables import format_table, write_csv
from .config import SCHEMES, ExperimentConfig, apply_overrides, with_seed
from .stages import EVALUATE, Workspace, run_pipeline

logger = logging.getLogger(__name__)

# 軸名 → (設定のキー, 既定の値)
AXES: dict[str, tuple[str, tuple]] = {
    'scheme': ('scheme', SCHEMES),
    'pseudo_count': ('pseudo_count', (5, 10, 25)),
    'components': ('components', ('all', 'encoder', 'decoder')),
    'fraction': ('fraction', (0.05, 0.10, 0.25, 0.50, 1.0)),
    'corpus': ('pretrain_corpus', ('multi', 'single')),
}

SUMMARY_METRICS = TABLE_COLUMNS + ('AR@10',)
OK = 'ok'
FAILED = 'failed'


def _parse_value(axis: str, raw: str):
    if axis == 'pseudo_count':
        return int(raw)
    if axis == 'fraction':
        return float(raw)
    return raw


def parse_axis(spec: str) -> tuple[str, tuple]:
    """'fraction' → 既定の値、'fraction=0.05,0.5' → 指定の値"""
    name, _, values = spec.partition('=')
    name = name.strip()
    if name not in AXES:
        raise ConfigError(f"Unknown matrix axis '{name}' (choose from {', '.join(AXES)})")
    if not values.strip():
        return name, AXES[name][1]
    try:
        parsed = tuple(_parse_value(name, v.strip()) for v in values.split(',') if v.strip())
    except ValueError as e:
        raise ConfigError(f"Bad value for matrix axis '{name}': {e}") from e
    if not parsed:
        raise ConfigError(f"Matrix axis '{name}' has no values")
    return name, parsed


@dataclass
class MatrixRun:
    cell: dict
    seed: int
    status: str
    metrics: dict | None = None
    error: str | None = None

    def row(self) -> dict:
        values = dict(self.cell, seed=self.seed, status=self.status)
        for name in SUMMARY_METRICS:
            values[name] = self.metrics.get(name) if self.metrics else None
        values['error'] = self.error or ''
        return values


@dataclass
class MatrixResult:
    axes: list[str]
    seeds: list[int]
    runs: list[MatrixRun] = field(default_factory=list)

    @property
    def failures(self) -> list[MatrixRun]:
        return [run for run in self.runs if run.status != OK]

    def summary_rows(self) -> list[dict]:
        """セルごとにシード間の平均と標準偏差（標本、シード1つなら0）"""
        cells: dict[tuple, list[MatrixRun]] = {}
        for run in self.runs:
            cells.setdefault(tuple(run.cell[a] for a in self.axes), []).append(run)
        rows = []
        for key, runs in cells.items():
            row = dict(zip(self.axes, key))
            ok = [run for run in runs if run.status == OK]
            row['seeds'] = len(ok)
            row['failed'] = len(runs) - len(ok)
            for name in SUMMARY_METRICS:
                values = [run.metrics.get(name) for run in ok]
                values = np.array([v for v in values if v is not None], dtype=np.float64)
                row[f'{name} mean'] = float(values.mean()) if values.size else None
                row[f'{name} sd'] = float(values.std(ddof=1)) if values.size > 1 else (0.0 if values.size else None)
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        return {
            'axes': self.axes,
            'seeds': self.seeds,
            'runs': [{'cell': r.cell, 'seed': r.seed, 'status': r.status, 'metrics': r.metrics, 'error': r.error}
                     for r in self.runs],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'MatrixResult':
        return cls(axes=list(data['axes']), seeds=list(data['seeds']),
                   runs=[MatrixRun(**run) for run in data['runs']])


def expand_matrix(base: ExperimentConfig, axes: Sequence[tuple[str, Sequence]],
                  seeds: Sequence[int]) -> list[tuple[dict, int, ExperimentConfig | None, str | None]]:
    """(セルの値, シード, 設定, 設定エラー) の一覧。設定として成り立たないセルはエラーを持つ"""
    names = [name for name, _ in axes]
    cells = []
    for values in product(*(values for _, values in axes)):
        cell = dict(zip(names, values))
        overrides = {AXES[name][0]: value for name, value in cell.items()}
        for seed in seeds:
            try:
                config = with_seed(apply_overrides(base, overrides), seed)
            except ConfigError as e:
                cells.append((cell, seed, None, str(e)))
                continue
            cells.append((cell, seed, config, None))
    return cells


def run_matrix(base: ExperimentConfig, axes: Sequence[tuple[str, Sequence]], seeds: Sequence[int],
               workspace: Workspace | None = None, out_dir: Path | str | None = None,
               runner: Callable = run_pipeline) -> MatrixResult:
    """全セル × 全シードを実行して集計を書き出す。

    データのシードは base のものを全セルで共有し、モデル・学習のシードだけを変える。
    """
    ws = workspace or Workspace()
    result = MatrixResult(axes=[name for name, _ in axes], seeds=list(seeds))
    cells = expand_matrix(base, axes, seeds)
    logger.info(f"Matrix {base.name}: {len(cells)} runs over axes {', '.join(result.axes) or '(none)'}")

    for index, (cell, seed, config, error) in enumerate(cells, start=1):
        if config is None:
            logger.error(f"Run {index}/{len(cells)} {cell} seed={seed} has an invalid config: {error}")
            result.runs.append(MatrixRun(cell, seed, FAILED, error=error))
            continue
        try:
            records = runner(config, ws)
            metrics = records[EVALUATE].metrics_table
            result.runs.append(MatrixRun(cell, seed, OK, metrics=metrics.row() if metrics else None))
            logger.info(f"Run {index}/{len(cells)} {cell} seed={seed}: AP={metrics.ap:.4f}" if metrics
                        else f"Run {index}/{len(cells)} {cell} seed={seed}: no metrics")
        except Exception as e:
            logger.error(f"Run {index}/{len(cells)} {cell} seed={seed} failed: {e}", exc_info=True,
                         extra={'cell': cell, 'seed': seed})
            result.runs.append(MatrixRun(cell, seed, FAILED, error=f'{type(e).__name__}: {e}'))

    if out_dir is not None:
        write_matrix(result, out_dir)
    if result.failures:
        logger.warning(f"Matrix {base.name}: {len(result.failures)} of {len(result.runs)} runs failed")
    return result


def _write_rows(path: Path, rows: list[dict]) -> Path:
    return write_csv(path, rows, list(rows[0]) if rows else [])


def _mean_sd(mean: float | None, sd: float | None) -> str:
    if mean is None:
        return '-'
    return f'{mean * 100:.1f} ± {sd * 100:.1f}'


def summary_text(result: MatrixResult) -> str:
    rows = []
    for row in result.summary_rows():
        line = {name: str(row[name]) for name in result.axes}
        line['n'] = str(row['seeds'])
        for name in TABLE_COLUMNS:
            line[name] = _mean_sd(row[f'{name} mean'], row[f'{name} sd'])
        rows.append(line)
    return format_table(rows, ['n'] + list(TABLE_COLUMNS), label_columns=result.axes)


def fraction_curve(result: MatrixResult) -> list[dict]:
    """データ割合ごとの AP（平均・標準偏差）。fraction 軸がなければ空"""
    if 'fraction' not in result.axes:
        return []
    others = [a for a in result.axes if a != 'fraction']
    rows = [
        {**{a: row[a] for a in others}, 'fraction': row['fraction'],
         'AP mean': row['AP mean'], 'AP sd': row['AP sd'], 'seeds': row['seeds']}
        for row in result.summary_rows()
    ]
    return sorted(rows, key=lambda r: tuple(str(r[a]) for a in others) + (r['fraction'],))


def write_matrix(result: MatrixResult, out_dir: Path | str) -> Path:
    out_dir = ensure_dir(out_dir)
    write_json(out_dir / 'summary.json', result.to_dict())
    _write_rows(out_dir / 'runs.csv', [run.row() for run in result.runs])
    _write_rows(out_dir / 'summary.csv', result.summary_rows())
    write_bytes_atomic(out_dir / 'summary.txt', summary_text(result).encode('utf-8'))
    curve = fraction_curve(result)
    if curve:
        _write_rows(out_dir / 'fraction_curve.csv', curve)
    logger.info(f"Wrote matrix summary to {out_dir}")
    return out_dir
