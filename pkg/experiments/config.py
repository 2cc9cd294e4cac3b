"""実験設定（ExperimentConfig）。

1実験 = 1つのJSONドキュメント。DRF のシリアライザで検証してから
凍結データクラスにする。設定ハッシュは正規化JSONのダイジェスト。
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path
import copy
import json
import logging
import math

from detector.checkpoints import resolve_components
from detector.network import ModelConfig
from detlab.exceptions import ConfigError
from detlab.utils import digest, read_json
from matching.costs import LossWeights
from matching.targets import DETREG, DETREG_PSEUDO_BOX, SELF_TRAIN, SUPERVISED
from scenes.shapes import SceneSpec

logger = logging.getLogger(__name__)

FROM_SCRATCH = 'from_scratch'
SCHEMES = (FROM_SCRATCH, DETREG, DETREG_PSEUDO_BOX, SELF_TRAIN, SUPERVISED)

# 事前学習コーパスのプリセット → 画像あたりの物体数の範囲
PRETRAIN_CORPORA = {
    'multi': (2, 12),
    'single': (1, 1),
}

NESTED_SECTIONS = ('scene', 'model', 'loss_weights', 'schedule', 'data')


@dataclass(frozen=True)
class Schedule:
    pretrain_epochs: int = 20
    finetune_epochs: int = 30
    teacher_epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-3
    drop_fraction: float = 0.8
    drop_factor: float = 0.1

    def drop_epoch(self, epochs: int) -> int:
        return math.floor(self.drop_fraction * epochs)

    def lr_at(self, epoch: int, epochs: int) -> float:
        """epoch は0始まり。drop_epoch 以降は base_lr × drop_factor"""
        if epoch >= self.drop_epoch(epochs):
            return self.base_lr * self.drop_factor
        return self.base_lr


@dataclass(frozen=True)
class Seeds:
    data: int
    model: int
    train: int


@dataclass(frozen=True)
class DataSizes:
    pretrain_images: int = 2000
    train_images: int = 500
    eval_images: int = 300


@dataclass(frozen=True)
class ExperimentConfig:
    scheme: str
    scene: SceneSpec
    model: ModelConfig
    loss_weights: LossWeights
    schedule: Schedule
    seeds: Seeds
    data: DataSizes
    name: str = 'default'
    pseudo_count: int = 10
    components: str = 'all'
    fraction: float = 1.0
    pretrain_corpus: str = 'multi'
    eval_every: int = 0

    @property
    def pretrain_scene(self) -> SceneSpec:
        low, high = PRETRAIN_CORPORA[self.pretrain_corpus]
        return replace(self.scene, min_objects=low, max_objects=high)

    @property
    def component_set(self) -> frozenset[str]:
        return resolve_components(self.components)

    @property
    def from_scratch(self) -> bool:
        return self.scheme == FROM_SCRATCH or not self.component_set

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        """クラス数を差し替えたモデル設定（2値ヘッドの事前学習用）"""
        if num_classes is None:
            return self.model
        return replace(self.model, num_classes=num_classes)

    def to_dict(self) -> dict:
        model = asdict(self.model)
        for derived in ('image_size', 'num_classes', 'seed'):
            model.pop(derived)
        return {
            'name': self.name,
            'scheme': self.scheme,
            'scene': self.scene.to_dict(),
            'model': model,
            'loss_weights': self.loss_weights.to_dict(),
            'schedule': asdict(self.schedule),
            'seeds': asdict(self.seeds),
            'data': asdict(self.data),
            'pseudo_count': self.pseudo_count,
            'components': self.components,
            'fraction': self.fraction,
            'pretrain_corpus': self.pretrain_corpus,
            'eval_every': self.eval_every,
        }

    @property
    def config_hash(self) -> str:
        return digest(self.to_dict())


def _flatten_errors(errors, prefix: str = '') -> list[str]:
    """DRF のエラー辞書を 'scene.image_size: ...' 形式の行にする"""
    if isinstance(errors, dict):
        lines = []
        for key, value in errors.items():
            path = f'{prefix}.{key}' if prefix else str(key)
            lines.extend(_flatten_errors(value, path))
        return lines
    if isinstance(errors, list):
        if errors and all(not isinstance(e, (dict, list)) for e in errors):
            return [f"{prefix}: {' '.join(str(e) for e in errors)}"]
        lines = []
        for e in errors:
            lines.extend(_flatten_errors(e, prefix))
        return lines
    return [f'{prefix}: {errors}']


def _unknown_fields(data: dict, serializer, prefix: str = '') -> list[str]:
    unknown = []
    for key, value in data.items():
        path = f'{prefix}{key}'
        field = serializer.fields.get(key)
        if field is None:
            unknown.append(path)
        elif hasattr(field, 'fields') and isinstance(value, dict):
            unknown.extend(_unknown_fields(value, field, f'{path}.'))
    return unknown


def config_from_dict(data: dict) -> ExperimentConfig:
    """辞書を検証して ExperimentConfig にする。

    Raises:
        ConfigError: 検証エラー（フィールドのパス付き）
    """
    from .serializers import ExperimentConfigSerializer

    if not isinstance(data, dict):
        raise ConfigError('Experiment config must be a JSON object')
    data = copy.deepcopy(data)
    for section in NESTED_SECTIONS:
        data.setdefault(section, {})

    serializer = ExperimentConfigSerializer(data=data)
    unknown = _unknown_fields(data, serializer)
    if unknown:
        raise ConfigError(f"Unknown experiment config fields: {', '.join(unknown)}")
    if not serializer.is_valid():
        raise ConfigError('Invalid experiment config: ' + '; '.join(_flatten_errors(serializer.errors)))
    v = serializer.validated_data

    seeds = Seeds(**v['seeds'])
    try:
        scene = SceneSpec(**v['scene'])
        model = ModelConfig(image_size=scene.image_size, num_classes=scene.num_classes,
                            seed=seeds.model, **v['model'])
        weights = LossWeights(**v['loss_weights'])
    except ConfigError as e:
        raise ConfigError(f'Invalid experiment config: {e}') from e
    return ExperimentConfig(
        scheme=v['scheme'],
        scene=scene,
        model=model,
        loss_weights=weights,
        schedule=Schedule(**v['schedule']),
        seeds=seeds,
        data=DataSizes(**v['data']),
        name=v['name'],
        pseudo_count=v['pseudo_count'],
        components=v['components'],
        fraction=v['fraction'],
        pretrain_corpus=v['pretrain_corpus'],
        eval_every=v['eval_every'],
    )


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    try:
        data = read_json(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed config JSON at {path}: {e}") from e
    except OSError as e:
        raise ConfigError(f"Cannot read config at {path}: {e}") from e
    config = config_from_dict(data)
    logger.debug(f"Loaded config {config.name} ({config.config_hash}) from {path}")
    return config


def apply_overrides(config: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    """'schedule.pretrain_epochs' のようなドット区切りのキーで上書きして再検証する。

    値が None のキーは無視する（CLI で未指定のフラグ）。
    """
    data = config.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split('.')
        for part in parents:
            child = node.get(part)
            if not isinstance(child, dict):
                raise ConfigError(f"Unknown config section '{part}' in override '{dotted}'")
            node = child
        node[leaf] = value
    return config_from_dict(data)


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """モデル・学習のシードを差し替える。データのシードは共有のまま"""
    return apply_overrides(config, {'seeds.model': seed, 'seeds.train': seed})


def default_config(scheme: str = SELF_TRAIN, **overrides) -> ExperimentConfig:
    """既定値の設定。overrides はドット区切りキーの代わりに '__' 区切りでも渡せる"""
    config = config_from_dict({'scheme': scheme, 'seeds': {'data': 1, 'model': 1, 'train': 1}})
    if overrides:
        config = apply_overrides(config, {k.replace('__', '.'): v for k, v in overrides.items()})
    return config
