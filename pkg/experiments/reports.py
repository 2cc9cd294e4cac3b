"""レポート: マトリクス結果の傾向ゲートと、位置ターゲット（提案 / 疑似ボックス）の品質。"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import logging

import numpy as np

from boxops.boxes import BoxCxCyWH
from detector.checkpoints import load_checkpoint
from detlab.exceptions import CheckpointError, StageError
from detlab.utils import read_json, write_bytes_atomic, write_json
from evaluation.metrics import (RECALL_COLUMNS, TABLE_COLUMNS, Detection, GroundTruthSet, MetricsTable,
                                evaluate_detections, ground_truth_from_manifest)
from evaluation.tables import format_table
from matching.targets import DETREG_PSEUDO_BOX, SELF_TRAIN, SUPERVISED
from proposals.selective_search import propose_boxes
from .config import FROM_SCRATCH, ExperimentConfig
from .inference import predict
from .matrix import OK, MatrixResult
from .pseudo_labels import select_pseudo_labels
from .stages import TEACHER_CHECKPOINT, TRAIN_TEACHER, Workspace, require_dataset, require_file

logger = logging.getLogger(__name__)

PASS = 'PASS'
FAIL = 'FAIL'
SKIP = 'SKIP'

SCHEME_ORDER = (SUPERVISED, SELF_TRAIN, DETREG_PSEUDO_BOX, FROM_SCRATCH)
MIN_SELF_TRAIN_GAIN = 2.0       # AP ポイント
ENCODER_SLACK = 0.5             # AP ポイント
MIN_RECALL_GAP = 0.3            # AR@10 の差（絶対値）

# ゲートで他の軸を固定するときの値
REFERENCE_CELL = {'fraction': 1.0, 'components': 'all', 'pseudo_count': 10, 'corpus': 'multi'}


@dataclass(frozen=True)
class GateResult:
    name: str
    status: str
    detail: str


def load_matrix_summary(path: Path | str) -> MatrixResult:
    try:
        return MatrixResult.from_dict(read_json(path))
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise StageError(f"Cannot read matrix summary {path}: {e}") from e


def _mean_ap(result: MatrixResult, **where) -> float | None:
    """条件に合う成功ランの平均 AP（ポイント）。where にない軸は REFERENCE_CELL で固定する"""
    fixed = {axis: value for axis, value in REFERENCE_CELL.items() if axis in result.axes}
    fixed.update(where)
    values = [
        run.metrics['AP'] for run in result.runs
        if run.status == OK and run.metrics and run.metrics.get('AP') is not None
        and all(run.cell.get(axis) == value for axis, value in fixed.items())
    ]
    return float(np.mean(values)) * 100 if values else None


def _has(result: MatrixResult, axis: str, values) -> bool:
    present = {run.cell.get(axis) for run in result.runs}
    return axis in result.axes and all(v in present for v in values)


def _missing(means: dict) -> list[str]:
    return [name for name, value in means.items() if value is None]


def _scheme_ordering(result: MatrixResult) -> GateResult:
    name = 'scheme ordering'
    if not _has(result, 'scheme', SCHEME_ORDER):
        return GateResult(name, SKIP, 'needs scheme axis with ' + ', '.join(SCHEME_ORDER))
    means = {scheme: _mean_ap(result, scheme=scheme) for scheme in SCHEME_ORDER}
    if _missing(means):
        return GateResult(name, SKIP, 'no successful runs for ' + ', '.join(_missing(means)))
    values = [means[s] for s in SCHEME_ORDER]
    ordered = all(a >= b for a, b in zip(values, values[1:]))
    gain = means[SELF_TRAIN] - means[FROM_SCRATCH]
    detail = ' >= '.join(f'{s} {means[s]:.1f}' for s in SCHEME_ORDER) + f'; self_train gain {gain:+.1f}'
    return GateResult(name, PASS if ordered and gain >= MIN_SELF_TRAIN_GAIN else FAIL, detail)


def _low_data(result: MatrixResult) -> GateResult:
    name = 'low-data gain'
    if not (_has(result, 'scheme', (SELF_TRAIN, FROM_SCRATCH)) and _has(result, 'fraction', (0.05, 0.5))):
        return GateResult(name, SKIP, 'needs scheme axis (self_train, from_scratch) and fraction axis (0.05, 0.5)')
    gains = {}
    for fraction in (0.05, 0.5):
        trained = _mean_ap(result, scheme=SELF_TRAIN, fraction=fraction)
        scratch = _mean_ap(result, scheme=FROM_SCRATCH, fraction=fraction)
        gains[fraction] = None if trained is None or scratch is None else trained - scratch
    if _missing(gains):
        return GateResult(name, SKIP, 'no successful runs at some fractions')
    detail = f'gain@0.05 {gains[0.05]:+.1f} vs gain@0.50 {gains[0.5]:+.1f}'
    return GateResult(name, PASS if gains[0.05] >= gains[0.5] else FAIL, detail)


def _encoder_vs_decoder(result: MatrixResult) -> GateResult:
    name = 'encoder vs decoder'
    if not _has(result, 'components', ('encoder', 'decoder')):
        return GateResult(name, SKIP, 'needs components axis with encoder, decoder')
    where = {'scheme': SELF_TRAIN} if 'scheme' in result.axes else {}
    encoder = _mean_ap(result, components='encoder', **where)
    decoder = _mean_ap(result, components='decoder', **where)
    if encoder is None or decoder is None:
        return GateResult(name, SKIP, 'no successful runs for encoder or decoder')
    detail = f'encoder {encoder:.1f} vs decoder {decoder:.1f} (slack {ENCODER_SLACK})'
    return GateResult(name, PASS if encoder >= decoder - ENCODER_SLACK else FAIL, detail)


def _threshold_consistency(result: MatrixResult) -> GateResult:
    name = 'threshold consistency'
    runs = [run for run in result.runs if run.status == OK and run.metrics]
    if not runs:
        return GateResult(name, SKIP, 'no successful runs')
    bad = [
        run for run in runs
        if not (run.metrics['AP50'] >= run.metrics['AP'] >= run.metrics['AP75'])
    ]
    if bad:
        cells = '; '.join(f"{run.cell} seed={run.seed}" for run in bad[:3])
        return GateResult(name, FAIL, f'{len(bad)} of {len(runs)} runs violate AP50 >= AP >= AP75 ({cells})')
    return GateResult(name, PASS, f'{len(runs)} runs')


def trend_gates(result: MatrixResult) -> list[GateResult]:
    gates = [_scheme_ordering(result), _low_data(result), _encoder_vs_decoder(result),
             _threshold_consistency(result)]
    for gate in gates:
        logger.info(f"Gate {gate.name}: {gate.status} ({gate.detail})")
    return gates


def gates_text(gates: list[GateResult]) -> str:
    rows = [{'gate': g.name, 'status': g.status, 'detail': g.detail} for g in gates]
    return format_table(rows, (), label_columns=('gate', 'status', 'detail'))


# 位置ターゲットの品質

def _agnostic(gt: dict[int, GroundTruthSet]) -> dict[int, GroundTruthSet]:
    return {image_id: GroundTruthSet(labels=np.zeros(len(g.labels), dtype=np.int64), boxes=g.boxes)
            for image_id, g in gt.items()}


def _ranked_detections(per_image: dict[int, list[tuple[np.ndarray, float]]]) -> list[Detection]:
    return [
        Detection(image_id, 0, BoxCxCyWH(*(float(v) for v in box)), float(score))
        for image_id, items in per_image.items() for box, score in items
    ]


def _box_quality(per_image, gt, k: int) -> MetricsTable:
    return evaluate_detections(_ranked_detections(per_image), gt, k=k)


def proposal_quality(config: ExperimentConfig, workspace: Workspace | None = None) -> dict[str, MetricsTable]:
    """評価用分割での選択的探索の提案と教師の疑似ボックスの品質（クラス非依存）。

    どちらもクエリ数 k 件までを順位（スコア）付きで評価する。

    Raises:
        StageError: データセットまたは教師チェックポイントがない
    """
    ws = workspace or Workspace()
    eval_split = require_dataset(config, ws, 'eval')
    k = config.model.num_queries
    gt = _agnostic(ground_truth_from_manifest(eval_split))

    proposals = {
        image_id: [(np.asarray(p.box), p.score) for p in propose_boxes(eval_split.load_pixels(image_id), top_k=k,
                                                                      seed=eval_split.seed)]
        for image_id in eval_split.image_ids
    }

    path = require_file(ws.stage_dir(config, TRAIN_TEACHER) / TEACHER_CHECKPOINT, 'run train_teacher first')
    try:
        teacher = load_checkpoint(path)
    except CheckpointError as e:
        raise StageError(f"Teacher checkpoint unavailable: {e}") from e
    pseudo = {
        image_id: [(box, score) for _, box, score in select_pseudo_labels(pred, k)]
        for image_id, pred in predict(teacher, eval_split).items()
    }
    return {
        'selective_search': _box_quality(proposals, gt, k),
        'pseudo_boxes': _box_quality(pseudo, gt, k),
    }


def recall_gap_gate(quality: dict[str, MetricsTable]) -> GateResult:
    name = 'proposal recall gap'
    teacher = quality['pseudo_boxes'].ar10
    proposals = quality['selective_search'].ar10
    if teacher is None or proposals is None:
        return GateResult(name, SKIP, 'no ground truth on the eval split')
    gap = teacher - proposals
    return GateResult(name, PASS if gap >= MIN_RECALL_GAP else FAIL,
                      f'pseudo-boxes AR@10 {teacher:.3f} vs selective search {proposals:.3f} (gap {gap:+.3f})')


def quality_text(quality: dict[str, MetricsTable]) -> str:
    rows = [{'source': source, **table.row()} for source, table in quality.items()]
    return format_table(rows, TABLE_COLUMNS + RECALL_COLUMNS, label_columns=('source',))


def write_proposal_report(quality: dict[str, MetricsTable], out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    gate = recall_gap_gate(quality)
    path = write_json(out_dir / 'proposal_quality.json', {
        **{source: table.to_dict() for source, table in quality.items()},
        'gate': {'name': gate.name, 'status': gate.status, 'detail': gate.detail},
    })
    text = quality_text(quality) + '\n' + gates_text([gate])
    write_bytes_atomic(out_dir / 'proposal_quality.txt', text.encode('utf-8'))
    return path
