"""
レポートを出力するDjango管理コマンド

使用方法:
    python manage.py report --kind matrix --summary work/matrix/default/summary.json
    python manage.py report --kind proposals --config experiment.json
"""

from pathlib import Path

from django.core.management.base import CommandError

from detlab.exceptions import DetlabError
from detlab.utils import write_bytes_atomic
from experiments.reports import (FAIL, gates_text, load_matrix_summary, proposal_quality, quality_text,
                                 recall_gap_gate, trend_gates, write_proposal_report)

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'マトリクス結果の傾向ゲート、または提案ボックスと疑似ボックスの品質を出力します'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--kind',
            choices=['matrix', 'proposals'],
            default='matrix',
            help='レポートの種類（デフォルト: matrix）'
        )
        parser.add_argument(
            '--summary',
            type=str,
            default=None,
            help='matrix の summary.json（デフォルト: <work-dir>/matrix/<実験名>/summary.json）'
        )
        parser.add_argument(
            '--strict',
            action='store_true',
            help='FAIL のゲートがあれば終了コードを非ゼロにする'
        )

    def handle(self, *args, **options):
        config = self.load_experiment(options)
        ws = self.workspace(options)

        try:
            if options['kind'] == 'matrix':
                path = Path(options['summary']) if options.get('summary') else \
                    ws.root / 'matrix' / config.name / 'summary.json'
                gates = trend_gates(load_matrix_summary(path))
                text = gates_text(gates)
                write_bytes_atomic(path.parent / 'gates.txt', text.encode('utf-8'))
            else:
                quality = proposal_quality(config, ws)
                gates = [recall_gap_gate(quality)]
                write_proposal_report(quality, ws.reports_dir())
                text = quality_text(quality) + '\n' + gates_text(gates)
        except DetlabError as e:
            raise CommandError(f'レポートの作成に失敗しました: {e}')

        self.stdout.write(text)
        failed = [g for g in gates if g.status == FAIL]
        if failed:
            self.stdout.write(self.style.WARNING(f'FAIL のゲート: {len(failed)}件'))
            if options['strict']:
                raise CommandError(', '.join(g.name for g in failed))
        else:
            self.stdout.write(self.style.SUCCESS('完了'))
