"""
実験マトリクスを実行するDjango管理コマンド

使用方法:
    python manage.py matrix --axis scheme
    python manage.py matrix --axis scheme=self_train,from_scratch --axis fraction
    python manage.py matrix --axis components=encoder,decoder --scheme self_train --seeds 1,2,3
"""

from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from detlab.exceptions import DetlabError
from experiments.matrix import AXES, parse_axis, run_matrix

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = '設定の軸を組み合わせて全セル × 全シードのパイプラインを実行し、平均 ± 標準偏差を集計します'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--axis',
            action='append',
            default=[],
            help=f"変化させる軸（{', '.join(AXES)}）。'fraction=0.05,0.5' のように値も指定可能。複数指定可"
        )
        parser.add_argument(
            '--seeds',
            type=str,
            default=None,
            help='カンマ区切りのシード（デフォルト: settings.DETLAB_DEFAULT_SEEDS）'
        )
        parser.add_argument(
            '--out',
            type=str,
            default=None,
            help='集計の出力先（デフォルト: <work-dir>/matrix/<実験名>）'
        )

    def handle(self, *args, **options):
        config = self.load_experiment(options)
        ws = self.workspace(options)
        try:
            axes = [parse_axis(spec) for spec in options['axis']]
        except DetlabError as e:
            raise CommandError(str(e))
        if len({name for name, _ in axes}) != len(axes):
            raise CommandError('同じ軸が複数回指定されています')

        if options.get('seeds'):
            try:
                seeds = [int(s) for s in options['seeds'].split(',') if s.strip()]
            except ValueError:
                raise CommandError(f"無効なシード: {options['seeds']}")
        else:
            seeds = list(settings.DETLAB_DEFAULT_SEEDS)
        if not seeds:
            raise CommandError('シードが指定されていません')

        out_dir = Path(options['out']) if options.get('out') else ws.root / 'matrix' / config.name
        n_cells = 1
        for _, values in axes:
            n_cells *= len(values)
        self.stdout.write(f'マトリクスを開始します: {n_cells}セル × {len(seeds)}シード')
        for name, values in axes:
            self.stdout.write(f"  {name}: {', '.join(str(v) for v in values)}")

        result = run_matrix(config, axes, seeds, workspace=ws, out_dir=out_dir)

        if result.failures:
            for run in result.failures:
                self.stdout.write(self.style.WARNING(f'失敗: {run.cell} seed={run.seed}: {run.error}'))
        self.stdout.write(
            self.style.SUCCESS(
                f'\n完了: {len(result.runs) - len(result.failures)}/{len(result.runs)}件成功、集計 {out_dir}'
            )
        )
        if len(result.failures) == len(result.runs):
            raise CommandError('すべてのランが失敗しました')
