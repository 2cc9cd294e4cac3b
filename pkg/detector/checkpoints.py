"""チェックポイントの保存と（部分）読み込み。

ファイル形式:
    MAGIC (8 bytes) | ヘッダ長 (uint32 LE) | ヘッダ JSON (UTF-8) | float32 LE のペイロード

ヘッダには version, config, metadata と、テンソルごとの
name / shape / offset / nbytes（ペイロード先頭からのバイト位置）が入る。
"""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path
import json
import logging
import struct

import numpy as np
from django.conf import settings

from detlab.exceptions import CheckpointError
from detlab.utils import write_bytes_atomic
from .network import COMPONENTS, ModelConfig, ModelParams, component_of, init_model, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b'DETLABCK'
SUPPORTED_VERSIONS = (1,)

# プリセット名 → 読み込むコンポーネント
COMPONENT_PRESETS = {
    'all': frozenset(COMPONENTS),
    'encoder': frozenset({'backbone', 'encoder'}),
    'decoder': frozenset({'backbone', 'decoder', 'queries', 'heads'}),
    'none': frozenset(),
}


def resolve_components(value) -> frozenset[str]:
    """プリセット名・カンマ区切り・集合のいずれかをコンポーネント集合にする"""
    if value is None:
        return COMPONENT_PRESETS['all']
    if isinstance(value, str):
        if value in COMPONENT_PRESETS:
            return COMPONENT_PRESETS[value]
        value = [v.strip() for v in value.split(',') if v.strip()]
    components = frozenset(value)
    unknown = components - set(COMPONENTS)
    if unknown:
        raise CheckpointError(f"Unknown components in filter: {sorted(unknown)}")
    return components


def _checkpoint_version() -> int:
    """書き込むバージョン（SUPPORTED_VERSIONS のいずれか）"""
    version = int(getattr(settings, 'DETLAB_CHECKPOINT_VERSION', SUPPORTED_VERSIONS[-1]))
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(
            f"DETLAB_CHECKPOINT_VERSION={version} is not supported (supported: {list(SUPPORTED_VERSIONS)})"
        )
    return version


def encode_checkpoint(params: ModelParams, metadata: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, tensor in params.tensors.items():
        raw = np.ascontiguousarray(tensor, dtype='<f4').tobytes()
        entries.append({'name': name, 'shape': list(tensor.shape), 'offset': offset, 'nbytes': len(raw)})
        chunks.append(raw)
        offset += len(raw)

    header = {
        'version': _checkpoint_version(),
        'config': params.config.to_dict(),
        'metadata': {**params.metadata, **(metadata or {})},
        'tensors': entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode('utf-8')
    return MAGIC + struct.pack('<I', len(header_bytes)) + header_bytes + b''.join(chunks)


def save_checkpoint(params: ModelParams, path: Path | str, metadata: dict | None = None) -> Path:
    path = write_bytes_atomic(path, encode_checkpoint(params, metadata))
    logger.info(f"Saved checkpoint ({params.count()} parameters) to {path}")
    return path


def read_header(blob: bytes) -> tuple[dict, memoryview]:
    """(ヘッダ, ペイロード) を返す。形式・バージョンの不一致は CheckpointError"""
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError('Not a detlab checkpoint (bad magic bytes)')
    start = len(MAGIC) + 4
    if len(blob) < start:
        raise CheckpointError('Checkpoint truncated before header')
    (header_len,) = struct.unpack('<I', blob[len(MAGIC):start])
    try:
        header = json.loads(blob[start:start + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint header: {e}") from e
    version = header.get('version')
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(f"Checkpoint version {version} is not supported (supported: {list(SUPPORTED_VERSIONS)})")
    return header, memoryview(blob)[start + header_len:]


def load_checkpoint(path: Path | str, components=None, *, config: ModelConfig | None = None,
                    seed: int | None = None, frozen=('backbone',)) -> ModelParams:
    """チェックポイントを読み込む。

    components に含まれるコンポーネントはファイルから、それ以外は seed で新規初期化する。
    クラスヘッドの出力数が config と異なる場合（2値ヘッド → 多クラスヘッド）は
    クラスヘッドだけ新規初期化する。

    Args:
        path: チェックポイントファイル
        components: プリセット名 / カンマ区切り / 集合。None なら全部
        config: 読み込み先のモデル設定。None ならファイルの設定
        seed: 新規初期化に使うシード。None なら config.seed
        frozen: 返す ModelParams の凍結コンポーネント

    Raises:
        CheckpointError: バージョン不一致、未知のテンソル名、長さ・形状の不一致
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    header, payload = read_header(blob)

    file_config = ModelConfig.from_dict(header['config'])
    target = config or file_config
    if seed is not None:
        target = replace(target, seed=seed)
    selected = resolve_components(components)
    expected = parameter_shapes(target)

    params = init_model(target, frozen=frozen)
    tensors = dict(params.tensors)
    for entry in header['tensors']:
        name = entry['name']
        if name not in expected:
            raise CheckpointError(f"Unknown tensor '{name}' in checkpoint {path}")
        shape = tuple(entry['shape'])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        offset = int(entry['offset'])
        if entry['nbytes'] != nbytes or offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(f"Tensor '{name}' has corrupt length in checkpoint {path}")
        if component_of(name) not in selected:
            continue
        if shape != expected[name]:
            if name.startswith('heads.class.'):
                logger.info(f"Class head arity changed {shape} -> {expected[name]}; re-initializing '{name}'")
                continue
            raise CheckpointError(f"Tensor '{name}' has shape {shape}, config expects {expected[name]}")
        tensors[name] = np.frombuffer(payload[offset:offset + nbytes], dtype='<f4').reshape(shape).astype(np.float32)

    loaded = sorted(selected)
    logger.debug(f"Loaded components {loaded} from {path}")
    return replace(params, tensors=tensors, metadata=dict(header.get('metadata', {})))
