from __future__ import annotations

"""ラボ共通のユーティリティ関数。"""

from pathlib import Path
import hashlib
import json
import logging
import os
import tempfile

import numpy as np

logger = logging.getLogger(__name__)


def canonical_json(data) -> bytes:
    """キーをソートした区切り最小のJSONバイト列を返す（ハッシュ・比較用）"""
    return json.dumps(data, sort_keys=True, separators=(',', ':'), ensure_ascii=False).encode('utf-8')


def digest(data, length: int = 16) -> str:
    """正規化JSONのSHA-256ダイジェスト（先頭length桁）"""
    return hashlib.sha256(canonical_json(data)).hexdigest()[:length]


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """(seed, keys...) から独立した乱数生成器を作る。

    画像ごと・コンポーネントごとのシードはここで派生させる。
    同じ引数なら常に同じ系列になる。
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


def ensure_dir(path: Path | str) -> Path:
    """ディレクトリを作成して返す。書き込めない場合は OSError をそのまま投げる"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_bytes_atomic(path: Path | str, payload: bytes) -> Path:
    """一時ファイルに書いてからリネームする（途中で落ちても壊れたファイルを残さない）"""
    path = Path(path)
    ensure_dir(path.parent)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as fh:
            fh.write(payload)
        os.replace(tmp_name, path)
    except Exception:
        # 書き込みに失敗した一時ファイルは削除
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def write_json(path: Path | str, data, *, indent: int | None = 2) -> Path:
    """JSONを書き出す。キー順は固定（同じ内容なら同じバイト列になる）"""
    text = json.dumps(data, sort_keys=True, indent=indent, ensure_ascii=False)
    return write_bytes_atomic(path, (text + '\n').encode('utf-8'))


def write_json_once(path: Path | str, data) -> bool:
    """不変の記録を書き出す。既に存在する場合は書かずに False を返す"""
    path = Path(path)
    if path.exists():
        logger.debug(f"Record already exists, keeping it: {path}")
        return False
    write_json(path, data)
    return True


def read_json(path: Path | str):
    with open(path, 'r', encoding='utf-8') as fh:
        return json.load(fh)
