"""
Django settings for detlab project.

実験ラボ全体のプロセス設定。実験ごとの設定（ExperimentConfig）はJSONファイルで
渡し、ここでは作業ディレクトリ・ログ・既定シードなど環境依存の値だけを扱う。

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# 環境変数の読み込み：
# .env.prod があれば先に読み込み、なければ .env.dev を読む
# override=False: 既に設定されている環境変数を優先する
env_prod_file = BASE_DIR / '.env.prod'
env_dev_file = BASE_DIR / '.env.dev'

ENVIRONMENT = os.getenv('ENVIRONMENT', 'development')

if env_prod_file.exists():
    load_dotenv(env_prod_file, override=False)
    if not os.getenv('ENVIRONMENT'):
        ENVIRONMENT = 'production'
elif env_dev_file.exists():
    load_dotenv(env_dev_file, override=False)

ENVIRONMENT = os.getenv('ENVIRONMENT', ENVIRONMENT)

# 管理コマンドとテストしか使わないが、Djangoの起動に必要
SECRET_KEY = os.getenv('SECRET_KEY', 'detlab-insecure-local-only')

DEBUG = os.getenv('DEBUG', 'False').lower() == 'true'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'rest_framework',
    # Local apps
    'detlab',
    'autodiff',
    'boxops',
    'scenes',
    'proposals',
    'detector',
    'matching',
    'evaluation',
    'experiments',  # 管理コマンド（gen_data, pretrain, matrix ...）
]

# データベースは使わない（成果物はすべてファイルで受け渡す）
DATABASES = {}

USE_I18N = False
USE_TZ = True
TIME_ZONE = os.getenv('TIME_ZONE', 'Asia/Tokyo')

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Django REST framework
# シリアライザによる設定ファイル・マニフェストの検証にのみ使う
REST_FRAMEWORK = {
    'UNAUTHENTICATED_USER': None,
}


# 実験ラボの設定

# 実験成果物（データセット・チェックポイント・レポート）の既定ルート
DETLAB_WORK_DIR = Path(os.getenv('DETLAB_WORK_DIR', str(BASE_DIR / 'work')))

# matrix実行で使う既定シード
default_seeds_str = os.getenv('DETLAB_DEFAULT_SEEDS', '1,2,3')
if not default_seeds_str or default_seeds_str.strip() == '':
    default_seeds_str = '1,2,3'
DETLAB_DEFAULT_SEEDS = [int(s.strip()) for s in default_seeds_str.split(',') if s.strip()]

# 書き出すチェックポイントのフォーマットバージョン
DETLAB_CHECKPOINT_VERSION = int(os.getenv('DETLAB_CHECKPOINT_VERSION', '1'))

DETLAB_LOG_LEVEL = os.getenv('DETLAB_LOG_LEVEL', 'DEBUG' if DEBUG else 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        app_name: {
            'handlers': ['console'],
            'level': DETLAB_LOG_LEVEL,
            'propagate': False,
        }
        for app_name in (
            'detlab', 'autodiff', 'boxops', 'scenes', 'proposals',
            'detector', 'matching', 'evaluation', 'experiments',
        )
    },
}
