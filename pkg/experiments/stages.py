"""パイプラインのステージ実行。

gen_data → train_teacher → pseudo_label → pretrain → finetune → evaluate

各ステージの出力は <作業ディレクトリ>/<ステージ>/<キー>/ に置く。キーはそのステージの
結果を決める設定だけのダイジェストなので、matrix の各セルは同じデータ・教師・
疑似ラベルを共有する。記録（record.json）があるステージは再実行しない。
"""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
import logging
import time

from django.conf import settings

from detector.checkpoints import load_checkpoint, save_checkpoint
from detector.embedding import crop_embed_many
from detector.network import init_model
from detlab.exceptions import CheckpointError, StageError
from detlab.utils import digest, ensure_dir
from evaluation.tables import write_metrics
from matching.targets import (DETREG, DETREG_PSEUDO_BOX, EMBEDDING_SCHEMES, SELF_TRAIN, SUPERVISED,
                              TargetSources, build_targets)
from scenes.generator import MANIFEST_NAME, generate_dataset
from scenes.manifest import DatasetManifest, load_manifest, subsample_dataset
from .config import ExperimentConfig
from .inference import evaluate_params, load_images
from .pseudo_labels import generate_proposal_labels, generate_pseudo_labels, labels_as_targets
from .records import RunRecord, has_record, load_record, save_record
from .training import TrainingSet, train_detector

logger = logging.getLogger(__name__)

GEN_DATA = 'gen_data'
TRAIN_TEACHER = 'train_teacher'
PSEUDO_LABEL = 'pseudo_label'
PRETRAIN = 'pretrain'
FINETUNE = 'finetune'
EVALUATE = 'evaluate'
STAGES = (GEN_DATA, TRAIN_TEACHER, PSEUDO_LABEL, PRETRAIN, FINETUNE, EVALUATE)

SPLITS = ('pretrain', 'train', 'eval')

TEACHER_CHECKPOINT = 'teacher.ckpt'
PRETRAIN_CHECKPOINT = 'pretrain.ckpt'
FINETUNE_INIT_CHECKPOINT = 'init.ckpt'
FINETUNE_CHECKPOINT = 'finetune.ckpt'

# 疑似ラベルの出どころ
TEACHER_SOURCE = 'teacher'
PROPOSAL_SOURCE = 'selective_search'


class Workspace:
    """実験成果物の置き場所"""

    def __init__(self, root: Path | str | None = None):
        self.root = Path(root) if root is not None else Path(settings.DETLAB_WORK_DIR)

    def dataset_dir(self, config: ExperimentConfig, split: str) -> Path:
        return self.root / 'datasets' / f'{split}-{dataset_key(config, split)}'

    def stage_dir(self, config: ExperimentConfig, stage: str) -> Path:
        return self.root / stage / stage_key(config, stage)

    def reports_dir(self) -> Path:
        return ensure_dir(self.root / 'reports')


def label_source(config: ExperimentConfig) -> str | None:
    if config.from_scratch or config.scheme == SUPERVISED:
        return None
    if config.scheme == DETREG:
        return PROPOSAL_SOURCE
    return TEACHER_SOURCE


def pipeline_stages(config: ExperimentConfig) -> list[str]:
    """このスキームで実行するステージ（順番どおり）"""
    stages = [GEN_DATA]
    source = label_source(config)
    if source == TEACHER_SOURCE:
        stages.append(TRAIN_TEACHER)
    if source is not None:
        stages.append(PSEUDO_LABEL)
    if not config.from_scratch:
        stages.append(PRETRAIN)
    return stages + [FINETUNE, EVALUATE]


# ステージのキー

def _dataset_params(config: ExperimentConfig, split: str):
    if split == 'pretrain':
        return config.pretrain_scene, config.data.pretrain_images
    if split == 'train':
        return config.scene, config.data.train_images
    if split == 'eval':
        return config.scene, config.data.eval_images
    raise StageError(f"Unknown split '{split}'")


def dataset_key(config: ExperimentConfig, split: str) -> str:
    scene, count = _dataset_params(config, split)
    return digest({'split': split, 'scene': scene.to_dict(), 'count': count, 'seed': config.seeds.data})


def _training_key(config: ExperimentConfig, epochs: int, num_classes: int | None = None) -> dict:
    schedule = config.schedule
    return {
        'model': asdict(config.model_config(num_classes)),
        'epochs': epochs,
        'batch_size': schedule.batch_size,
        'lr': [schedule.base_lr, schedule.drop_fraction, schedule.drop_factor],
        'train_seed': config.seeds.train,
        'loss_weights': config.loss_weights.to_dict(),
    }


def stage_key(config: ExperimentConfig, stage: str) -> str:
    if stage == GEN_DATA:
        return digest({split: dataset_key(config, split) for split in SPLITS})
    if stage == TRAIN_TEACHER:
        return digest({'train': dataset_key(config, 'train'),
                       **_training_key(config, config.schedule.teacher_epochs)})
    if stage == PSEUDO_LABEL:
        source = label_source(config)
        upstream = stage_key(config, TRAIN_TEACHER) if source == TEACHER_SOURCE else None
        return digest({'source': source, 'teacher': upstream,
                       'corpus': dataset_key(config, 'pretrain'), 'count': config.pseudo_count})
    if stage == PRETRAIN:
        binary = config.scheme in EMBEDDING_SCHEMES
        labels = stage_key(config, PSEUDO_LABEL) if label_source(config) else dataset_key(config, 'pretrain')
        return digest({'scheme': config.scheme, 'labels': labels,
                       **_training_key(config, config.schedule.pretrain_epochs, 1 if binary else None)})
    if stage == FINETUNE:
        init = None
        if not config.from_scratch:
            init = {'pretrain': stage_key(config, PRETRAIN), 'components': sorted(config.component_set)}
        return digest({
            'init': init,
            'train': dataset_key(config, 'train'),
            'fraction': config.fraction,
            'subset_seed': config.seeds.data,
            'eval_every': config.eval_every,
            'eval': dataset_key(config, 'eval') if config.eval_every else None,
            **_training_key(config, config.schedule.finetune_epochs),
        })
    if stage == EVALUATE:
        return digest({'finetune': stage_key(config, FINETUNE), 'eval': dataset_key(config, 'eval')})
    raise StageError(f"Unknown stage '{stage}' (choose from {', '.join(STAGES)})")


# データ・チェックポイントの受け渡し

def ensure_dataset(config: ExperimentConfig, ws: Workspace, split: str) -> DatasetManifest:
    directory = ws.dataset_dir(config, split)
    path = directory / MANIFEST_NAME
    if path.exists():
        return load_manifest(path)
    scene, count = _dataset_params(config, split)
    return generate_dataset(scene, count, config.seeds.data, directory, split=split,
                            dataset_id=f'{split}-{dataset_key(config, split)}')


def require_dataset(config: ExperimentConfig, ws: Workspace, split: str) -> DatasetManifest:
    path = ws.dataset_dir(config, split) / MANIFEST_NAME
    if not path.exists():
        raise StageError(f"Dataset '{split}' not found at {path}; run gen_data first")
    return load_manifest(path)


def require_file(path: Path, hint: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} not found; {hint}")
    return path


def supervised_training_set(manifest: DatasetManifest, num_queries: int) -> TrainingSet:
    targets = []
    for image_id in manifest.image_ids:
        labels, boxes = manifest.targets_for(image_id)
        targets.append(build_targets(SUPERVISED, TargetSources(boxes=boxes, labels=labels), num_queries))
    return TrainingSet(images=load_images(manifest), targets=targets)


def pretrain_training_set(config: ExperimentConfig, corpus: DatasetManifest, labels: DatasetManifest,
                          params) -> TrainingSet:
    """スキームに応じた事前学習ターゲット。DETReg 系は凍結バックボーンの切り出し埋め込みを付ける"""
    images = load_images(corpus)
    k = params.config.num_queries
    targets = []
    for image, image_id in zip(images, corpus.image_ids):
        class_ids, boxes, scores = labels_as_targets(labels, image_id)
        if config.scheme in EMBEDDING_SCHEMES:
            sources = TargetSources(boxes=boxes, scores=scores, embeddings=crop_embed_many(params, image, boxes))
        elif config.scheme == SELF_TRAIN:
            sources = TargetSources(boxes=boxes, scores=scores, labels=class_ids)
        else:
            sources = TargetSources(boxes=boxes, labels=class_ids)
        targets.append(build_targets(config.scheme, sources, k, params.config.embed_dim))
    return TrainingSet(images=images, targets=targets)


def evaluate_checkpoint(path: Path | str, manifest: DatasetManifest):
    try:
        params = load_checkpoint(path)
    except CheckpointError as e:
        raise StageError(f"Cannot evaluate {path}: {e}") from e
    return evaluate_params(params, manifest)


# ステージ本体。戻り値は RunRecord のフィールド

def _gen_data(config: ExperimentConfig, ws: Workspace, directory: Path) -> dict:
    artifacts = {}
    for split in SPLITS:
        manifest = ensure_dataset(config, ws, split)
        artifacts[split] = str(ws.dataset_dir(config, split) / MANIFEST_NAME)
        logger.info(f"Dataset {split}: {len(manifest.images)} images, {len(manifest.annotations)} objects")
    return {'artifacts': artifacts}


def _train_teacher(config: ExperimentConfig, ws: Workspace, directory: Path) -> dict:
    train = require_dataset(config, ws, 'train')
    params = init_model(config.model, frozen=())
    data = supervised_training_set(train, config.model.num_queries)
    teacher, history = train_detector(
        params, data, epochs=config.schedule.teacher_epochs, schedule=config.schedule,
        weights=config.loss_weights, use_embedding=False, seed=config.seeds.train, label='teacher',
    )
    path = save_checkpoint(teacher, directory / TEACHER_CHECKPOINT, metadata={'stage': TRAIN_TEACHER})
    metrics = evaluate_params(teacher, require_dataset(config, ws, 'eval'))
    return {'epochs': history, 'metrics': metrics.to_dict(), 'checkpoints': {'teacher': str(path)}}


def _pseudo_label(config: ExperimentConfig, ws: Workspace, directory: Path) -> dict:
    source = label_source(config)
    if source is None:
        raise StageError(f"Scheme '{config.scheme}' does not use pseudo-labels")
    corpus = require_dataset(config, ws, 'pretrain')
    out_path = directory / MANIFEST_NAME
    if source == TEACHER_SOURCE:
        teacher = require_file(ws.stage_dir(config, TRAIN_TEACHER) / TEACHER_CHECKPOINT, 'run train_teacher first')
        generate_pseudo_labels(teacher, corpus, config.pseudo_count, out_path)
    else:
        generate_proposal_labels(corpus, config.pseudo_count, out_path)
    return {'artifacts': {'labels': str(out_path)}, 'metadata': {'source': source}}


def _pretrain(config: ExperimentConfig, ws: Workspace, directory: Path) -> dict:
    if config.from_scratch:
        raise StageError('from_scratch runs have no pre-training stage')
    corpus = require_dataset(config, ws, 'pretrain')
    if label_source(config) is None:
        labels = corpus
    else:
        path = require_file(ws.stage_dir(config, PSEUDO_LABEL) / MANIFEST_NAME, 'run pseudo_label first')
        labels = load_manifest(path, root=corpus.root)

    binary = config.scheme in EMBEDDING_SCHEMES
    params = init_model(config.model_config(1 if binary else None), frozen=('backbone',))
    data = pretrain_training_set(config, corpus, labels, params)
    trained, history = train_detector(
        params, data, epochs=config.schedule.pretrain_epochs, schedule=config.schedule,
        weights=config.loss_weights, use_embedding=binary, seed=config.seeds.train,
        label=f'pretrain[{config.scheme}]',
    )
    path = save_checkpoint(trained, directory / PRETRAIN_CHECKPOINT,
                           metadata={'stage': PRETRAIN, 'scheme': config.scheme})
    metrics = None
    if not binary:
        # クラス数が下流と同じなら、そのまま評価できる
        metrics = evaluate_params(trained, require_dataset(config, ws, 'eval')).to_dict()
    return {'epochs': history, 'metrics': metrics, 'checkpoints': {'pretrain': str(path)}}


def _finetune(config: ExperimentConfig, ws: Workspace, directory: Path) -> dict:
    train = require_dataset(config, ws, 'train')
    if config.fraction < 1.0:
        train = subsample_dataset(train, config.fraction, config.seeds.data)

    if config.from_scratch:
        params = init_model(config.model, frozen=())
    else:
        path = require_file(ws.stage_dir(config, PRETRAIN) / PRETRAIN_CHECKPOINT,
                            f"scheme '{config.scheme}' needs a pre-trained checkpoint; run pretrain first")
        try:
            params = load_checkpoint(path, config.component_set, config=config.model, frozen=())
        except CheckpointError as e:
            raise StageError(f"Incompatible pre-trained checkpoint: {e}") from e
    init_path = save_checkpoint(params, directory / FINETUNE_INIT_CHECKPOINT, metadata={'stage': FINETUNE, 'step': 0})

    eval_hook = None
    if config.eval_every:
        eval_split = require_dataset(config, ws, 'eval')

        def eval_hook(current):
            row = evaluate_params(current, eval_split).row()
            return {name: row[name] for name in ('AP', 'AP50', 'AP75')}

    data = supervised_training_set(train, config.model.num_queries)
    trained, history = train_detector(
        params, data, epochs=config.schedule.finetune_epochs, schedule=config.schedule,
        weights=config.loss_weights, use_embedding=False, seed=config.seeds.train,
        label=f'finetune[{config.scheme}]', eval_hook=eval_hook, eval_every=config.eval_every,
    )
    path = save_checkpoint(trained, directory / FINETUNE_CHECKPOINT, metadata={'stage': FINETUNE})
    return {
        'epochs': history,
        'checkpoints': {'init': str(init_path), 'finetune': str(path)},
        'metadata': {'train_images': len(train.images)},
    }


def _evaluate(config: ExperimentConfig, ws: Workspace, directory: Path) -> dict:
    checkpoint = require_file(ws.stage_dir(config, FINETUNE) / FINETUNE_CHECKPOINT, 'run finetune first')
    table = evaluate_checkpoint(checkpoint, require_dataset(config, ws, 'eval'))
    title = f'{config.name} scheme={config.scheme} components={config.components} fraction={config.fraction:g}'
    json_path = write_metrics(table, directory / 'metrics.json', directory / 'metrics.txt', title=title)
    return {'metrics': table.to_dict(), 'checkpoints': {'finetune': str(checkpoint)},
            'artifacts': {'metrics': str(json_path)}}


STAGE_RUNNERS = {
    GEN_DATA: _gen_data,
    TRAIN_TEACHER: _train_teacher,
    PSEUDO_LABEL: _pseudo_label,
    PRETRAIN: _pretrain,
    FINETUNE: _finetune,
    EVALUATE: _evaluate,
}


def run_stage(config: ExperimentConfig, stage: str, workspace: Workspace | None = None) -> RunRecord:
    """1ステージを実行して RunRecord を返す。

    既に記録があるステージは実行せずに記録を返す。

    Raises:
        StageError: 入力が揃っていない、チェックポイントが設定と合わない
        NonFiniteError: 学習中に NaN/Inf が出た場合
    """
    if stage not in STAGE_RUNNERS:
        raise StageError(f"Unknown stage '{stage}' (choose from {', '.join(STAGES)})")
    ws = workspace or Workspace()
    directory = ws.stage_dir(config, stage)
    if has_record(directory):
        logger.info(f"Stage {stage} already recorded at {directory}; reusing it")
        return load_record(directory)

    ensure_dir(directory)
    logger.info(f"Running {stage} for {config.name} (scheme={config.scheme}, config={config.config_hash})")
    started = time.perf_counter()
    fields = STAGE_RUNNERS[stage](config, ws, directory)
    record = RunRecord(
        stage=stage,
        stage_key=directory.name,
        config_hash=config.config_hash,
        wall_clock_seconds=round(time.perf_counter() - started, 3),
        **fields,
    )
    save_record(record, directory)
    return record


def run_pipeline(config: ExperimentConfig, workspace: Workspace | None = None,
                 through: str = EVALUATE) -> dict[str, RunRecord]:
    """スキームに必要なステージを順に実行する"""
    ws = workspace or Workspace()
    records: dict[str, RunRecord] = {}
    for stage in pipeline_stages(config):
        records[stage] = run_stage(config, stage, ws)
        if stage == through:
            break
    return records
