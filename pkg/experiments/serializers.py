from rest_framework import serializers

from detector.checkpoints import COMPONENT_PRESETS
from detector.network import COMPONENTS
from .config import PRETRAIN_CORPORA, SCHEMES


class SceneSerializer(serializers.Serializer):
    image_size = serializers.IntegerField(min_value=32, default=64)
    num_classes = serializers.IntegerField(min_value=2, max_value=6, default=6)
    min_objects = serializers.IntegerField(min_value=1, max_value=20, default=1)
    max_objects = serializers.IntegerField(min_value=1, max_value=20, default=6)
    allow_occlusion = serializers.BooleanField(default=False)
    noise = serializers.FloatField(min_value=0.0, default=0.03)
    jitter = serializers.FloatField(min_value=0.0, default=0.08)

    def validate(self, attrs):
        if attrs['min_objects'] > attrs['max_objects']:
            raise serializers.ValidationError({'min_objects': 'min_objects は max_objects 以下にしてください'})
        return attrs


class ModelSerializer(serializers.Serializer):
    """画像サイズ・クラス数・シードは scene / seeds から決まるのでここには書かない"""
    patch_size = serializers.IntegerField(min_value=1, default=8)
    width = serializers.IntegerField(min_value=4, default=64)
    ffn_width = serializers.IntegerField(min_value=1, default=128)
    encoder_layers = serializers.IntegerField(min_value=1, default=2)
    decoder_layers = serializers.IntegerField(min_value=1, default=2)
    num_queries = serializers.IntegerField(min_value=1, default=25)
    embed_dim = serializers.IntegerField(min_value=4, default=32)

    def validate_width(self, value: int) -> int:
        if value % 4:
            raise serializers.ValidationError('4の倍数にしてください')
        return value


class LossWeightsSerializer(serializers.Serializer):
    class_weight = serializers.FloatField(min_value=0.0, default=2.0)
    l1_weight = serializers.FloatField(min_value=0.0, default=5.0)
    giou_weight = serializers.FloatField(min_value=0.0, default=2.0)
    embed_weight = serializers.FloatField(min_value=0.0, default=1.0)
    no_object_weight = serializers.FloatField(min_value=0.0, default=0.1)


class ScheduleSerializer(serializers.Serializer):
    pretrain_epochs = serializers.IntegerField(min_value=1, default=20)
    finetune_epochs = serializers.IntegerField(min_value=1, default=30)
    teacher_epochs = serializers.IntegerField(min_value=1, default=30)
    batch_size = serializers.IntegerField(min_value=1, default=16)
    base_lr = serializers.FloatField(min_value=0.0, default=1e-3)
    drop_fraction = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.8)
    drop_factor = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.1)


class SeedsSerializer(serializers.Serializer):
    # シードは省略不可（実験の再現に必要）
    data = serializers.IntegerField(min_value=0)
    model = serializers.IntegerField(min_value=0)
    train = serializers.IntegerField(min_value=0)


class DataSizesSerializer(serializers.Serializer):
    pretrain_images = serializers.IntegerField(min_value=1, default=2000)
    train_images = serializers.IntegerField(min_value=1, default=500)
    eval_images = serializers.IntegerField(min_value=1, default=300)


class ExperimentConfigSerializer(serializers.Serializer):
    """実験設定JSON全体"""
    name = serializers.RegexField(r'^[A-Za-z0-9_.-]+$', max_length=64, default='default')
    scheme = serializers.ChoiceField(choices=SCHEMES)
    scene = SceneSerializer()
    model = ModelSerializer()
    loss_weights = LossWeightsSerializer()
    schedule = ScheduleSerializer()
    seeds = SeedsSerializer()
    data = DataSizesSerializer()
    pseudo_count = serializers.IntegerField(min_value=1, default=10)
    components = serializers.CharField(default='all')
    fraction = serializers.FloatField(default=1.0)
    pretrain_corpus = serializers.ChoiceField(choices=sorted(PRETRAIN_CORPORA), default='multi')
    eval_every = serializers.IntegerField(min_value=0, default=0)

    def validate_fraction(self, value: float) -> float:
        if not 0 < value <= 1:
            raise serializers.ValidationError('0 < fraction <= 1 の範囲で指定してください')
        return value

    def validate_components(self, value: str) -> str:
        if value in COMPONENT_PRESETS:
            return value
        names = [v.strip() for v in value.split(',') if v.strip()]
        unknown = sorted(set(names) - set(COMPONENTS))
        if not names or unknown:
            raise serializers.ValidationError(
                f'プリセット {sorted(COMPONENT_PRESETS)} かコンポーネント {list(COMPONENTS)} のカンマ区切りを指定してください'
            )
        # 順序を正規化してハッシュを安定させる
        return ','.join(c for c in COMPONENTS if c in names)

    def validate(self, attrs):
        num_queries = attrs['model']['num_queries']
        if attrs['pseudo_count'] > num_queries:
            raise serializers.ValidationError(
                {'pseudo_count': f"疑似ラベル数 {attrs['pseudo_count']} がクエリ数 {num_queries} を超えています"}
            )
        if attrs['scene']['max_objects'] > num_queries:
            raise serializers.ValidationError(
                {'scene': f"max_objects {attrs['scene']['max_objects']} がクエリ数 {num_queries} を超えています"}
            )
        corpus_max = PRETRAIN_CORPORA[attrs['pretrain_corpus']][1]
        if corpus_max > num_queries:
            raise serializers.ValidationError(
                {'pretrain_corpus': f"事前学習コーパスの物体数 {corpus_max} がクエリ数 {num_queries} を超えています"}
            )
        if attrs['scene']['image_size'] % attrs['model']['patch_size']:
            raise serializers.ValidationError({'model': 'image_size は patch_size の倍数にしてください'})
        return attrs
