# app_aqa/serializers.py
from math import isfinite

from rest_framework import serializers

from .action_net import STREAM_SETS
from .context_attention import ATTENTION_NORMS, VARIANTS
from .feature_io import SPLITS, WINDOW_MODES
from .run_config import PRESETS, RunConfig


class CommaSeparatedListField(serializers.ListField):
    """Accepts a list or a comma-separated string such as '150, 180'."""

    def to_internal_value(self, data):
        if isinstance(data, str):
            data = [item.strip() for item in data.split(",") if item.strip()]
        elif isinstance(data, tuple):
            data = list(data)
        return super().to_internal_value(data)


class FiniteFloatField(serializers.FloatField):
    def to_internal_value(self, data):
        value = super().to_internal_value(data)
        if not isfinite(value):
            raise serializers.ValidationError("A finite number is required.")
        return value


class RunConfigSerializer(serializers.Serializer):
    preset = serializers.ChoiceField(choices=sorted(PRESETS))
    manifest = serializers.CharField(allow_blank=True, trim_whitespace=True)
    out_dir = serializers.CharField(allow_blank=False, trim_whitespace=True)
    checkpoint = serializers.CharField(allow_blank=True, trim_whitespace=True)
    seed = serializers.IntegerField(min_value=0)
    streams = serializers.ChoiceField(choices=sorted(STREAM_SETS))
    attention = serializers.ChoiceField(choices=list(VARIANTS))
    attention_norm = serializers.ChoiceField(choices=list(ATTENTION_NORMS))
    adjacency_grad = serializers.BooleanField()
    kernel_scale = FiniteFloatField()
    dropout = FiniteFloatField(min_value=0.0)
    window_dynamic = serializers.IntegerField(min_value=1)
    window_static = serializers.IntegerField(min_value=1)
    window_mode = serializers.ChoiceField(choices=list(WINDOW_MODES))
    batch_size = serializers.IntegerField(min_value=1)
    epochs = serializers.IntegerField(min_value=1)
    decay_epochs = CommaSeparatedListField(child=serializers.IntegerField(min_value=0), allow_empty=True)
    decay_rate = FiniteFloatField(min_value=0.0)
    lr_attention = FiniteFloatField(min_value=0.0)
    lr_prediction = FiniteFloatField(min_value=0.0)
    momentum = FiniteFloatField(min_value=0.0)
    weight_decay = FiniteFloatField(min_value=0.0)
    workers = serializers.IntegerField(min_value=1)
    split = serializers.ChoiceField(choices=list(SPLITS))
    video_ids = CommaSeparatedListField(child=serializers.CharField(), allow_empty=True)
    seeds = CommaSeparatedListField(child=serializers.IntegerField(min_value=0), allow_empty=False)
    n_videos = serializers.IntegerField(min_value=2)
    n_test = serializers.IntegerField(min_value=0)
    n_dynamic = serializers.IntegerField(min_value=1)
    n_static = serializers.IntegerField(min_value=1)
    key_count = serializers.IntegerField(min_value=1)
    noise_sigma = FiniteFloatField(min_value=0.0)

    def validate_kernel_scale(self, value):
        if value <= 0:
            raise serializers.ValidationError("Must be greater than 0.")
        return value

    def validate_dropout(self, value):
        if value >= 1.0:
            raise serializers.ValidationError("Must be below 1.")
        return value

    def validate_decay_epochs(self, value):
        if any(later <= earlier for earlier, later in zip(value, value[1:])):
            raise serializers.ValidationError("decay_epochs must be strictly increasing.")
        return value

    def validate(self, attrs):
        epochs = attrs.get("epochs")
        late = [epoch for epoch in attrs.get("decay_epochs", []) if epoch >= epochs]
        if late:
            raise serializers.ValidationError({"decay_epochs": f"All decay epochs must be below epochs={epochs}."})
        if attrs["n_test"] >= attrs["n_videos"]:
            raise serializers.ValidationError({"n_test": "Must leave at least one training video."})
        if attrs["key_count"] > min(attrs["n_dynamic"], attrs["n_static"]):
            raise serializers.ValidationError({"key_count": "Cannot exceed the instance count of either stream."})
        return attrs

    def create(self, validated_data):
        data = dict(validated_data)
        for key in ("decay_epochs", "video_ids", "seeds"):
            data[key] = tuple(data[key])
        return RunConfig(**data)
