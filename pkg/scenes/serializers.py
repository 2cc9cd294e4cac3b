from rest_framework import serializers


class ImageEntrySerializer(serializers.Serializer):
    id = serializers.IntegerField(min_value=1)
    file_name = serializers.CharField(max_length=512)
    width = serializers.IntegerField(min_value=1)
    height = serializers.IntegerField(min_value=1)


class AnnotationEntrySerializer(serializers.Serializer):
    id = serializers.IntegerField(min_value=1)
    image_id = serializers.IntegerField(min_value=1)
    category_id = serializers.IntegerField(min_value=0)
    bbox = serializers.ListField(child=serializers.FloatField(), min_length=4, max_length=4)
    area = serializers.FloatField(required=False)
    iscrowd = serializers.IntegerField(required=False, default=0)
    score = serializers.FloatField(required=False, allow_null=True, default=None)

    def validate_bbox(self, value: list[float]) -> list[float]:
        x, y, w, h = value
        if w <= 0 or h <= 0:
            raise serializers.ValidationError(f'幅と高さは正の値が必要です: {value}')
        if x < 0 or y < 0:
            raise serializers.ValidationError(f'座標が負です: {value}')
        return value


class CategoryEntrySerializer(serializers.Serializer):
    id = serializers.IntegerField(min_value=0)
    name = serializers.CharField(max_length=64)
    supercategory = serializers.CharField(max_length=64, required=False, default='shape')


class ManifestSerializer(serializers.Serializer):
    """COCO形式のデータセットマニフェスト"""
    info = serializers.DictField(required=False, default=dict)
    images = ImageEntrySerializer(many=True)
    annotations = AnnotationEntrySerializer(many=True)
    categories = CategoryEntrySerializer(many=True, allow_empty=False)

    def validate(self, attrs):
        """画像IDの重複・参照切れ・画像外のボックスを検出する"""
        image_sizes: dict[int, tuple[int, int]] = {}
        for image in attrs['images']:
            if image['id'] in image_sizes:
                raise serializers.ValidationError({'images': f"画像IDが重複しています: {image['id']}"})
            image_sizes[image['id']] = (image['width'], image['height'])

        category_ids = {c['id'] for c in attrs['categories']}
        seen_annotation_ids = set()
        for ann in attrs['annotations']:
            if ann['id'] in seen_annotation_ids:
                raise serializers.ValidationError({'annotations': f"アノテーションIDが重複しています: {ann['id']}"})
            seen_annotation_ids.add(ann['id'])
            if ann['image_id'] not in image_sizes:
                raise serializers.ValidationError(
                    {'annotations': f"annotation {ann['id']} references missing image id {ann['image_id']}"}
                )
            if ann['category_id'] not in category_ids:
                raise serializers.ValidationError(
                    {'annotations': f"annotation {ann['id']} has unknown category id {ann['category_id']}"}
                )
            width, height = image_sizes[ann['image_id']]
            x, y, w, h = ann['bbox']
            # 浮動小数の丸め分だけ許容する
            if x + w > width + 1e-6 or y + h > height + 1e-6:
                raise serializers.ValidationError(
                    {'annotations': f"annotation {ann['id']} box {ann['bbox']} exceeds image {ann['image_id']} ({width}x{height})"}
                )
        return attrs
