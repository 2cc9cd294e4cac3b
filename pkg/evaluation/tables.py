"""評価結果の書き出し（JSON / CSV / 桁揃えのテキスト表）。"""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
import csv
import io
import logging

from detlab.utils import write_bytes_atomic, write_json
from .metrics import TABLE_COLUMNS, MetricsTable

logger = logging.getLogger(__name__)

MISSING = '-'


def format_value(value, *, percent: bool = True) -> str:
    """None は '-'。数値は既定で百分率（小数1桁）"""
    if value is None:
        return MISSING
    if isinstance(value, float):
        return f'{value * 100:.1f}' if percent else f'{value:.4f}'
    return str(value)


def format_table(rows: Sequence[Mapping[str, object]], columns: Sequence[str], *,
                 label_columns: Sequence[str] = (), percent: bool = True) -> str:
    """桁を揃えたテキスト表。ラベル列は左寄せ、値の列は右寄せ"""
    header = list(label_columns) + list(columns)
    body = [
        [str(row.get(name, '')) for name in label_columns]
        + [row[name] if isinstance(row.get(name), str) else format_value(row.get(name), percent=percent)
           for name in columns]
        for row in rows
    ]
    widths = [max(len(header[i]), *(len(line[i]) for line in body)) if body else len(header[i])
              for i in range(len(header))]
    n_labels = len(label_columns)

    def render(cells: list[str]) -> str:
        parts = [
            cell.ljust(widths[i]) if i < n_labels else cell.rjust(widths[i])
            for i, cell in enumerate(cells)
        ]
        return '  '.join(parts).rstrip()

    lines = [render(header), render(['-' * w for w in widths])]
    lines.extend(render(line) for line in body)
    return '\n'.join(lines) + '\n'


def metrics_text(table: MetricsTable, title: str | None = None, *, with_recall: bool = False) -> str:
    columns = list(TABLE_COLUMNS) + (['AR@1', 'AR@10', 'AR@k'] if with_recall else [])
    text = format_table([table.row()], columns)
    return f'{title}\n{text}' if title else text


def write_metrics(table: MetricsTable, json_path: Path | str, text_path: Path | str | None = None,
                  title: str | None = None) -> Path:
    """MetricsTable を JSON（とテキスト表）で書き出す"""
    path = write_json(json_path, table.to_dict())
    if text_path is not None:
        write_bytes_atomic(text_path, metrics_text(table, title, with_recall=True).encode('utf-8'))
    logger.info(f"Wrote metrics to {path}")
    return path


def csv_text(rows: Iterable[Mapping[str, object]], columns: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), extrasaction='ignore', lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow({name: '' if row.get(name) is None else row.get(name) for name in columns})
    return buffer.getvalue()


def write_csv(path: Path | str, rows: Iterable[Mapping[str, object]], columns: Sequence[str]) -> Path:
    return write_bytes_atomic(path, csv_text(rows, columns).encode('utf-8'))
