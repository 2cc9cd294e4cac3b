"""
実験コマンド共通の引数と設定の読み込み

設定は --config の JSON（省略時は既定値）に、個別フラグを上書きして作る。
"""

from django.core.management.base import BaseCommand, CommandError

from detlab.exceptions import DetlabError
from experiments.config import SCHEMES, PRETRAIN_CORPORA, apply_overrides, default_config, load_config
from evaluation.tables import format_value
from experiments.stages import Workspace, run_stage

# フラグ → 設定のキー
OVERRIDE_FLAGS = {
    'name': ('name', str, '実験名'),
    'scheme': ('scheme', str, f"事前学習スキーム（{', '.join(SCHEMES)}）"),
    'pseudo_count': ('pseudo_count', int, '画像あたりの疑似ラベル数 k̄'),
    'components': ('components', str, '読み込むコンポーネント（all / encoder / decoder / none またはカンマ区切り）'),
    'fraction': ('fraction', float, 'ファインチューニングに使う学習データの割合'),
    'corpus': ('pretrain_corpus', str, f"事前学習コーパス（{', '.join(PRETRAIN_CORPORA)}）"),
    'eval_every': ('eval_every', int, 'ファインチューニング中に評価するエポック間隔（0で無効）'),
    'pretrain_epochs': ('schedule.pretrain_epochs', int, '事前学習のエポック数'),
    'finetune_epochs': ('schedule.finetune_epochs', int, 'ファインチューニングのエポック数'),
    'teacher_epochs': ('schedule.teacher_epochs', int, '教師モデルのエポック数'),
    'batch_size': ('schedule.batch_size', int, 'バッチサイズ'),
    'lr': ('schedule.base_lr', float, '学習率'),
    'pretrain_images': ('data.pretrain_images', int, '事前学習コーパスの画像数'),
    'train_images': ('data.train_images', int, '下流学習データの画像数'),
    'eval_images': ('data.eval_images', int, '下流評価データの画像数'),
    'data_seed': ('seeds.data', int, 'データ生成のシード'),
    'model_seed': ('seeds.model', int, 'モデル初期化のシード'),
    'train_seed': ('seeds.train', int, '学習（シャッフル）のシード'),
}


class ExperimentCommand(BaseCommand):
    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            type=str,
            default=None,
            help='実験設定のJSONファイル（指定しない場合は既定の設定）'
        )
        parser.add_argument(
            '--work-dir',
            type=str,
            default=None,
            help='成果物の出力先（デフォルト: settings.DETLAB_WORK_DIR）'
        )
        for flag, (_, kind, help_text) in OVERRIDE_FLAGS.items():
            parser.add_argument(f"--{flag.replace('_', '-')}", type=kind, default=None, help=help_text)

    def load_experiment(self, options):
        try:
            config = load_config(options['config']) if options.get('config') else default_config()
            overrides = {key: options.get(flag) for flag, (key, _, _) in OVERRIDE_FLAGS.items()}
            return apply_overrides(config, overrides)
        except DetlabError as e:
            raise CommandError(str(e))

    def workspace(self, options) -> Workspace:
        return Workspace(options.get('work_dir'))


class StageCommand(ExperimentCommand):
    """1ステージだけ実行するコマンド"""

    stage: str = ''

    def handle(self, *args, **options):
        config = self.load_experiment(options)
        ws = self.workspace(options)
        self.stdout.write(f'{self.stage} を実行します（{config.name}, scheme={config.scheme}, 設定 {config.config_hash}）')
        try:
            record = run_stage(config, self.stage, ws)
        except DetlabError as e:
            raise CommandError(f'{self.stage} に失敗しました: {e}')

        for name, path in record.checkpoints.items():
            self.stdout.write(f'チェックポイント {name}: {path}')
        table = record.metrics_table
        if table is not None:
            row = table.row()
            self.stdout.write('  '.join(f'{k}={format_value(v)}' for k, v in row.items()))
        self.stdout.write(
            self.style.SUCCESS(f'\n完了: {ws.stage_dir(config, self.stage)}（{record.wall_clock_seconds:.1f}秒）')
        )
