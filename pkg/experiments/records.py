from __future__ import annotations

"""ステージの実行記録（RunRecord）。一度書いたら上書きしない。"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
import logging

from detlab.exceptions import StageError
from detlab.utils import read_json, write_json_once
from evaluation.metrics import MetricsTable

logger = logging.getLogger(__name__)

RECORD_NAME = 'record.json'


@dataclass(frozen=True)
class RunRecord:
    stage: str
    stage_key: str
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    metrics: dict | None = None
    checkpoints: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)     # 名前 → パス
    metadata: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    @property
    def metrics_table(self) -> MetricsTable | None:
        return MetricsTable.from_dict(self.metrics) if self.metrics is not None else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'RunRecord':
        return cls(**data)


def save_record(record: RunRecord, directory: Path | str) -> Path:
    """記録を書き出す。既にある場合は既存のものを残す"""
    path = Path(directory) / RECORD_NAME
    if write_json_once(path, record.to_dict()):
        logger.info(f"Wrote {record.stage} record {record.stage_key} to {path}")
    return path


def load_record(directory: Path | str) -> RunRecord:
    path = Path(directory) / RECORD_NAME
    try:
        return RunRecord.from_dict(read_json(path))
    except (OSError, ValueError, TypeError) as e:
        raise StageError(f"Cannot read run record {path}: {e}") from e


def has_record(directory: Path | str) -> bool:
    return (Path(directory) / RECORD_NAME).exists()
