from rest_framework import serializers

from diffusion.sampler import UnmaskPolicy
from diffusion.services import LAMBDA_MAX, S_WARM, TextLoss
from diffusion.networks import InputScaling
from mdlm.layout import TruncationPolicy
from numcodec.networks import PROJECTOR_DROPOUT
from schedules.services import DEFAULT_RHO, SIGMA_MAX, SIGMA_MIN, MaskScheduleKind
from tabular.generators import GENERATORS

DTYPE_CHOICES = ['float32', 'float64']


class DatasetSerializer(serializers.Serializer):
    name = serializers.ChoiceField(choices=sorted(GENERATORS) + ['custom'], default='custom')
    validation = serializers.CharField(required=False, allow_blank=True, default='')
    truncation = serializers.ChoiceField(choices=TruncationPolicy.CHOICES, default=TruncationPolicy.FAIL)
    validation_truncation = serializers.ChoiceField(
        choices=TruncationPolicy.CHOICES, default=TruncationPolicy.TRUNCATE,
    )


class BackboneSerializer(serializers.Serializer):
    layers = serializers.IntegerField(min_value=1, default=4)
    model_dim = serializers.IntegerField(min_value=1, default=128)
    heads = serializers.IntegerField(min_value=1, default=4)
    ff_dim = serializers.IntegerField(min_value=1, default=512)
    max_len = serializers.IntegerField(min_value=1, default=256)
    dropout = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.0)
    lora_rank = serializers.IntegerField(min_value=0, default=0)
    lora_alpha = serializers.FloatField(min_value=0.0, default=32.0)
    lora_dropout = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.05)
    use_positions = serializers.BooleanField(default=True)

    def validate(self, attrs):
        if attrs['model_dim'] % attrs['heads']:
            raise serializers.ValidationError("model_dim must be divisible by heads.")
        return attrs


class CodecSerializer(serializers.Serializer):
    latent_dim = serializers.IntegerField(min_value=1, default=16)
    projector_dropout = serializers.FloatField(min_value=0.0, max_value=1.0, default=PROJECTOR_DROPOUT)
    input_scaling = serializers.ChoiceField(choices=list(InputScaling.CHOICES), default=InputScaling.NONE)
    epochs = serializers.IntegerField(min_value=1, default=3000)
    polish_steps = serializers.IntegerField(min_value=0, default=500)
    lr = serializers.FloatField(min_value=0.0, default=1e-2)
    seed = serializers.IntegerField(min_value=0, default=0)
    strict = serializers.BooleanField(default=True)


class ScheduleSerializer(serializers.Serializer):
    sigma_min = serializers.FloatField(min_value=0.0, default=SIGMA_MIN)
    sigma_max = serializers.FloatField(min_value=0.0, default=SIGMA_MAX)
    rho = serializers.FloatField(min_value=0.0, default=DEFAULT_RHO)
    learnable_rho = serializers.BooleanField(default=False)
    mask = serializers.ChoiceField(choices=MaskScheduleKind.values, default=MaskScheduleKind.LINEAR)

    def validate(self, attrs):
        if not 0 < attrs['sigma_min'] < attrs['sigma_max']:
            raise serializers.ValidationError("Need 0 < sigma_min < sigma_max.")
        if attrs['rho'] <= 0:
            raise serializers.ValidationError({'rho': "rho must be positive."})
        return attrs


class TrainingSerializer(serializers.Serializer):
    epochs = serializers.IntegerField(min_value=1, default=50)
    batch_size = serializers.IntegerField(min_value=1, default=64)
    lr = serializers.FloatField(min_value=0.0, default=2e-4)
    betas = serializers.ListField(child=serializers.FloatField(min_value=0.0, max_value=1.0),
                                  min_length=2, max_length=2, default=[0.9, 0.98])
    eps = serializers.FloatField(min_value=0.0, default=1e-8)
    weight_decay = serializers.FloatField(min_value=0.0, default=1e-4)
    warmup_ratio = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.1)
    grad_clip = serializers.FloatField(min_value=0.0, default=1.0)
    lambda_max = serializers.FloatField(min_value=0.0, default=LAMBDA_MAX)
    s_warm = serializers.IntegerField(min_value=0, default=S_WARM)
    text_loss = serializers.ChoiceField(choices=list(TextLoss.CHOICES), default=TextLoss.PLAIN)
    seed = serializers.IntegerField(min_value=0, default=0)
    checkpoint_every = serializers.IntegerField(min_value=0, default=0)
    train_fraction = serializers.FloatField(min_value=0.0, max_value=1.0, default=1.0)
    dtype = serializers.ChoiceField(choices=DTYPE_CHOICES, default='float32')


class SamplerSerializer(serializers.Serializer):
    steps = serializers.IntegerField(min_value=1, default=50)
    policy = serializers.ChoiceField(choices=UnmaskPolicy.values, default=UnmaskPolicy.CONFIDENCE)
    temperature = serializers.FloatField(min_value=0.0, default=1.0)
    s_churn = serializers.FloatField(min_value=0.0, default=0.0)
    s_tmin = serializers.FloatField(min_value=0.0, default=0.0)
    s_tmax = serializers.FloatField(min_value=0.0, required=False, allow_null=True, default=None)
    s_noise = serializers.FloatField(min_value=0.0, default=1.0)
    seed = serializers.IntegerField(min_value=0, default=0)
    batch_size = serializers.IntegerField(min_value=1, default=64)

    def validate_temperature(self, value):
        if value <= 0:
            raise serializers.ValidationError("Temperature must be positive.")
        return value


class RunConfigSerializer(serializers.Serializer):
    """Validates a run configuration document with every section present (possibly empty)."""
    dataset = DatasetSerializer()
    backbone = BackboneSerializer()
    codec = CodecSerializer()
    schedule = ScheduleSerializer()
    training = TrainingSerializer()
    sampler = SamplerSerializer()
