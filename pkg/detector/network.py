"""小さなクエリベース集合予測検出器。

構成: パッチ埋め込みのバックボーン → 自己注意エンコーダ → クエリがエンコーダ出力に
交差注意するデコーダ → クラス / ボックス / 埋め込みの3つの線形ヘッド。
注意はすべて単一ヘッド、ブロックは post-norm。

テンソル名は `component.layer.name` 形式で、先頭がコンポーネント名になる。
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import logging
import math

import numpy as np

from autodiff.engine import Graph, Tensor
from detlab.exceptions import ConfigError, ShapeMismatchError
from detlab.utils import derive_rng

logger = logging.getLogger(__name__)

COMPONENTS = ('backbone', 'encoder', 'decoder', 'queries', 'heads')

# 正規化に使う画素の中心とスケール
PIXEL_MEAN = 0.5
PIXEL_SCALE = 0.25


@dataclass(frozen=True)
class ModelConfig:
    """検出器の形状。num_classes は ∅ を含まない（ヘッドの出力は num_classes + 1）"""
    image_size: int = 64
    patch_size: int = 8
    width: int = 64
    ffn_width: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_queries: int = 25
    num_classes: int = 6
    embed_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ConfigError('encoder_layers and decoder_layers must be >= 1')
        if self.embed_dim < 4:
            raise ConfigError(f"embed_dim must be >= 4, got {self.embed_dim}")
        if self.num_queries < 1 or self.num_classes < 1:
            raise ConfigError('num_queries and num_classes must be >= 1')
        if self.width % 4:
            raise ConfigError(f"width must be a multiple of 4 for the 2-D position encoding, got {self.width}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def no_object(self) -> int:
        """∅ クラスのインデックス（ロジットの最後）"""
        return self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelConfig':
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown model config fields: {sorted(unknown)}")
        return cls(**data)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """全テンソルの名前と形状（生成順）"""
    w, f = config.width, config.ffn_width
    shapes: dict[str, tuple[int, ...]] = {
        'backbone.patch.weight': (config.patch_dim, w),
        'backbone.patch.bias': (w,),
        'backbone.proj.weight': (w, w),
        'backbone.proj.bias': (w,),
    }

    def attention(prefix: str, tag: str):
        for part in ('q', 'k', 'v', 'o'):
            shapes[f'{prefix}.{tag}_{part}_weight'] = (w, w)
            shapes[f'{prefix}.{tag}_{part}_bias'] = (w,)

    def norm(prefix: str, tag: str):
        shapes[f'{prefix}.{tag}_gamma'] = (w,)
        shapes[f'{prefix}.{tag}_beta'] = (w,)

    def ffn(prefix: str):
        shapes[f'{prefix}.ffn1_weight'] = (w, f)
        shapes[f'{prefix}.ffn1_bias'] = (f,)
        shapes[f'{prefix}.ffn2_weight'] = (f, w)
        shapes[f'{prefix}.ffn2_bias'] = (w,)

    for i in range(config.encoder_layers):
        prefix = f'encoder.{i}'
        attention(prefix, 'self')
        norm(prefix, 'ln1')
        ffn(prefix)
        norm(prefix, 'ln2')
    for i in range(config.decoder_layers):
        prefix = f'decoder.{i}'
        attention(prefix, 'self')
        norm(prefix, 'ln1')
        attention(prefix, 'cross')
        norm(prefix, 'ln2')
        ffn(prefix)
        norm(prefix, 'ln3')

    shapes['queries.embed.weight'] = (config.num_queries, w)
    shapes['heads.class.weight'] = (w, config.num_classes + 1)
    shapes['heads.class.bias'] = (config.num_classes + 1,)
    shapes['heads.box.weight'] = (w, 4)
    shapes['heads.box.bias'] = (4,)
    shapes['heads.embed.weight'] = (w, config.embed_dim)
    shapes['heads.embed.bias'] = (config.embed_dim,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    """設定から閉じた式で求めたパラメータ数"""
    w, f, P = config.width, config.ffn_width, config.patch_dim
    attn = 4 * (w * w + w)
    ln = 2 * w
    ffn = w * f + f + f * w + w
    backbone = P * w + w + w * w + w
    encoder = config.encoder_layers * (attn + ffn + 2 * ln)
    decoder = config.decoder_layers * (2 * attn + ffn + 3 * ln)
    queries = config.num_queries * w
    heads = (w + 1) * (config.num_classes + 1) + (w + 1) * 4 + (w + 1) * config.embed_dim
    return backbone + encoder + decoder + queries + heads


def component_of(name: str) -> str:
    component = name.split('.', 1)[0]
    if component not in COMPONENTS:
        raise ShapeMismatchError(f"Tensor '{name}' does not belong to any component")
    return component


def init_tensor(config: ModelConfig, name: str, shape: tuple[int, ...], seed: int | None = None) -> np.ndarray:
    """1個のテンソルを初期化する。

    乱数はテンソルごとに (seed, コンポーネント番号, コンポーネント内の番号) から派生させるので、
    ほかのテンソルの形状が変わっても値は変わらない。
    """
    seed = config.seed if seed is None else seed
    component = component_of(name)
    same_component = [n for n in parameter_shapes(config) if component_of(n) == component]
    rng = derive_rng(seed, COMPONENTS.index(component), same_component.index(name))

    leaf = name.rsplit('.', 1)[-1]
    if leaf.endswith('gamma'):
        return np.ones(shape, dtype=np.float32)
    if leaf.endswith('bias') or leaf.endswith('beta'):
        return np.zeros(shape, dtype=np.float32)
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    frozen: frozenset[str] = frozenset({'backbone'})
    metadata: dict = field(default_factory=dict)

    def component(self, component: str) -> dict[str, np.ndarray]:
        return {n: t for n, t in self.tensors.items() if component_of(n) == component}

    def trainable(self, name: str) -> bool:
        return component_of(name) not in self.frozen

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> 'ModelParams':
        return replace(self, tensors=dict(tensors))

    def with_frozen(self, frozen) -> 'ModelParams':
        unknown = set(frozen) - set(COMPONENTS)
        if unknown:
            raise ConfigError(f"Unknown components: {sorted(unknown)}")
        return replace(self, frozen=frozenset(frozen))

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def init_model(config: ModelConfig, *, frozen=('backbone',)) -> ModelParams:
    """Xavier-uniform（バイアス0、LayerNorm の gamma は1）で初期化する"""
    tensors = {name: init_tensor(config, name, shape) for name, shape in parameter_shapes(config).items()}
    logger.debug(f"Initialized model with {sum(t.size for t in tensors.values())} parameters (seed={config.seed})")
    return ModelParams(config=config, tensors=tensors, frozen=frozenset(frozen))


def position_encoding(config: ModelConfig) -> np.ndarray:
    """パッチ格子の2次元 sin/cos 位置エンコーディング (tokens, width)"""
    grid = config.grid
    quarter = config.width // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing='ij')
    ys = ys.reshape(-1, 1) * freqs
    xs = xs.reshape(-1, 1) * freqs
    return np.concatenate([np.sin(ys), np.cos(ys), np.sin(xs), np.cos(xs)], axis=1).astype(np.float32)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, 3) → (B, パッチ数, patch*patch*3)、画素は正規化済み"""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ShapeMismatchError(f"Image {h}x{w} is not divisible into {patch_size}px patches")
    gh, gw = h // patch_size, w // patch_size
    patches = images.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return ((patches.reshape(b, gh * gw, patch_size * patch_size * c) - PIXEL_MEAN) / PIXEL_SCALE).astype(np.float32)


@dataclass
class PredictionNodes:
    """グラフ上の予測。logits (B,k,C+1), boxes (B,k,4), embeddings (B,k,d)"""
    logits: Tensor
    boxes: Tensor
    embeddings: Tensor


@dataclass(frozen=True)
class PredictionSet:
    """1枚分の予測（numpy）"""
    logits: np.ndarray
    boxes: np.ndarray
    embeddings: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        shifted = self.logits - self.logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)


def _attention(graph: Graph, p: dict[str, Tensor], prefix: str, tag: str,
               queries: Tensor, keys: Tensor, width: int) -> Tensor:
    q = queries @ p[f'{prefix}.{tag}_q_weight'] + p[f'{prefix}.{tag}_q_bias']
    k = keys @ p[f'{prefix}.{tag}_k_weight'] + p[f'{prefix}.{tag}_k_bias']
    v = keys @ p[f'{prefix}.{tag}_v_weight'] + p[f'{prefix}.{tag}_v_bias']
    scores = graph.mul(q @ graph.swapaxes(k, -1, -2), 1.0 / math.sqrt(width))
    attended = graph.softmax(scores, axis=-1) @ v
    return attended @ p[f'{prefix}.{tag}_o_weight'] + p[f'{prefix}.{tag}_o_bias']


def _norm(graph: Graph, p: dict[str, Tensor], prefix: str, tag: str, x: Tensor) -> Tensor:
    return graph.layer_norm(x, p[f'{prefix}.{tag}_gamma'], p[f'{prefix}.{tag}_beta'])


def _ffn(graph: Graph, p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    hidden = graph.relu(x @ p[f'{prefix}.ffn1_weight'] + p[f'{prefix}.ffn1_bias'])
    return hidden @ p[f'{prefix}.ffn2_weight'] + p[f'{prefix}.ffn2_bias']


def bind_parameters(graph: Graph, params: ModelParams) -> dict[str, Tensor]:
    """パラメータをグラフに登録する。凍結コンポーネントは定数扱い"""
    return {name: graph.parameter(name, value, trainable=params.trainable(name))
            for name, value in params.tensors.items()}


def forward_graph(graph: Graph, nodes: dict[str, Tensor], config: ModelConfig, images: np.ndarray) -> PredictionNodes:
    """バッチ画像 (B, H, W, 3) の順伝播をグラフ上に構築する"""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (config.image_size, config.image_size, 3):
        raise ShapeMismatchError(
            f"Expected images of shape (B, {config.image_size}, {config.image_size}, 3), got {images.shape}"
        )
    p = nodes
    w = config.width
    batch = images.shape[0]

    patches = graph.constant(patchify(images, config.patch_size))
    hidden = graph.relu(patches @ p['backbone.patch.weight'] + p['backbone.patch.bias'])
    memory = hidden @ p['backbone.proj.weight'] + p['backbone.proj.bias']
    memory = memory + position_encoding(config)

    for i in range(config.encoder_layers):
        prefix = f'encoder.{i}'
        memory = _norm(graph, p, prefix, 'ln1', memory + _attention(graph, p, prefix, 'self', memory, memory, w))
        memory = _norm(graph, p, prefix, 'ln2', memory + _ffn(graph, p, prefix, memory))

    # デコーダの入力はクエリ埋め込みそのもの（バッチ方向にブロードキャスト）
    target = p['queries.embed.weight'] + np.zeros((batch, config.num_queries, w), dtype=graph.dtype)
    for i in range(config.decoder_layers):
        prefix = f'decoder.{i}'
        target = _norm(graph, p, prefix, 'ln1', target + _attention(graph, p, prefix, 'self', target, target, w))
        target = _norm(graph, p, prefix, 'ln2', target + _attention(graph, p, prefix, 'cross', target, memory, w))
        target = _norm(graph, p, prefix, 'ln3', target + _ffn(graph, p, prefix, target))

    logits = target @ p['heads.class.weight'] + p['heads.class.bias']
    boxes = graph.sigmoid(target @ p['heads.box.weight'] + p['heads.box.bias'])
    embeddings = target @ p['heads.embed.weight'] + p['heads.embed.bias']
    return PredictionNodes(logits=logits, boxes=boxes, embeddings=embeddings)


def forward(params: ModelParams, images: np.ndarray) -> list[PredictionSet]:
    """推論用の順伝播（勾配なし）。画像ごとの PredictionSet を返す"""
    graph = Graph(dtype=np.float32, record=False)
    nodes = {name: graph.parameter(name, value, trainable=False) for name, value in params.tensors.items()}
    out = forward_graph(graph, nodes, params.config, images)
    return [
        PredictionSet(logits=out.logits.data[b], boxes=out.boxes.data[b], embeddings=out.embeddings.data[b])
        for b in range(out.logits.shape[0])
    ]


def backbone_features(params: ModelParams, patches: np.ndarray) -> np.ndarray:
    """バックボーンだけを numpy で計算する（パッチ (..., patch_dim) → (..., width)）"""
    t = params.tensors
    hidden = np.maximum(patches @ t['backbone.patch.weight'] + t['backbone.patch.bias'], 0.0)
    return hidden @ t['backbone.proj.weight'] + t['backbone.proj.bias']
