"""
Run configuration: YAML/JSON documents validated into frozen dataclasses.
"""
from dataclasses import asdict, dataclass, field
import hashlib
import json
import logging
from pathlib import Path

import torch
import yaml
from django.core.exceptions import ImproperlyConfigured

from diffusion.sampler import SamplerConfig
from diffusion.training import TrainingConfig
from mdlm.layout import TruncationPolicy
from mdlm.networks import BackboneConfig
from schedules.services import ChurnConfig, MaskSchedule

from .serializers import RunConfigSerializer

logger = logging.getLogger(__name__)

SECTIONS = ('dataset', 'backbone', 'codec', 'schedule', 'training', 'sampler')
DTYPES = {'float32': torch.float32, 'float64': torch.float64}


@dataclass(frozen=True)
class DatasetConfig:
    name: str = 'custom'
    validation: str = ''
    # overlong text fields in the training and validation tables
    truncation: str = TruncationPolicy.FAIL
    validation_truncation: str = TruncationPolicy.TRUNCATE


@dataclass(frozen=True)
class CodecConfig:
    latent_dim: int = 16
    projector_dropout: float = 0.1
    input_scaling: str = 'none'
    epochs: int = 3000
    polish_steps: int = 500
    lr: float = 1e-2
    seed: int = 0
    strict: bool = True


@dataclass(frozen=True)
class ScheduleConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    learnable_rho: bool = False
    mask: str = 'linear'

    def mask_schedule(self):
        return MaskSchedule(self.mask)


@dataclass(frozen=True)
class SamplerSettings:
    steps: int = 50
    policy: str = 'confidence'
    temperature: float = 1.0
    s_churn: float = 0.0
    s_tmin: float = 0.0
    s_tmax: float | None = None
    s_noise: float = 1.0
    seed: int = 0
    batch_size: int = 64

    def sampler_config(self, **overrides):
        """SamplerConfig with command-line overrides (None means keep)."""
        values = asdict(self)
        values.update({k: v for k, v in overrides.items() if v is not None})
        churn = ChurnConfig(
            s_churn=values['s_churn'], s_tmin=values['s_tmin'],
            s_tmax=float('inf') if values['s_tmax'] is None else values['s_tmax'],
            s_noise=values['s_noise'],
        )
        return SamplerConfig(
            steps=values['steps'], policy=values['policy'], temperature=values['temperature'],
            churn=churn, seed=values['seed'], batch_size=values['batch_size'],
        )


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    train_fraction: float = 1.0
    dtype: str = 'float32'

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self):
        data = asdict(self)
        data['training']['betas'] = list(self.training.betas)
        return data

    @property
    def config_hash(self):
        return config_hash(self)


def config_hash(config):
    """SHA-256 of the canonical JSON form of a RunConfig."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def parse_run_config(data):
    """Validate a raw mapping and build the RunConfig."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ImproperlyConfigured("A run configuration must be a mapping of sections")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ImproperlyConfigured(f"Unknown configuration sections: {unknown}")
    serializer = RunConfigSerializer(data={section: data.get(section) or {} for section in SECTIONS})
    if not serializer.is_valid():
        raise ImproperlyConfigured(f"Invalid run configuration: {dict(serializer.errors)}")
    validated = serializer.validated_data

    training = dict(validated['training'])
    train_fraction = training.pop('train_fraction')
    dtype = training.pop('dtype')
    training['betas'] = tuple(training['betas'])
    try:
        return RunConfig(
            dataset=DatasetConfig(**validated['dataset']),
            backbone=BackboneConfig(**validated['backbone']),
            codec=CodecConfig(**validated['codec']),
            schedule=ScheduleConfig(**validated['schedule']),
            training=TrainingConfig(**training),
            sampler=SamplerSettings(**validated['sampler']),
            train_fraction=train_fraction,
            dtype=dtype,
        )
    except ValueError as exc:
        raise ImproperlyConfigured(f"Invalid run configuration: {exc}") from exc


def load_run_config(path):
    """Read a YAML or JSON run configuration file."""
    path = Path(path)
    if not path.exists():
        raise ImproperlyConfigured(f"Configuration file {path} does not exist")
    with open(path, 'r', encoding='utf-8') as handle:
        try:
            data = yaml.safe_load(handle)
        except yaml.YAMLError as exc:
            raise ImproperlyConfigured(f"Could not parse {path}: {exc}") from exc
    config = parse_run_config(data)
    logger.info(f"Loaded run configuration {path} (hash {config.config_hash[:12]})")
    return config


def run_config_from_dict(data):
    """Rebuild a RunConfig from its to_dict() form (as stored in checkpoints)."""
    data = dict(data)
    training = dict(data['training'])
    training['train_fraction'] = data.get('train_fraction', 1.0)
    training['dtype'] = data.get('dtype', 'float32')
    sections = {section: data[section] for section in SECTIONS if section != 'training'}
    sections['training'] = training
    return parse_run_config(sections)
