"""
Experiment orchestration behind the management commands.

Each entry point ties the per-module services into one runnable step of
the gen-data -> pretrain-codec -> train -> sample -> eval pipeline and
writes artifacts that carry the config hash, the seeds and the hashes of
their inputs.
"""
from dataclasses import asdict, dataclass
import logging
import math
from pathlib import Path

import torch
from django.conf import settings
from django.core.exceptions import ImproperlyConfigured
from django.db import DatabaseError

from diffusion.networks import build_denoiser
from diffusion.sampler import SampleResult, finalize, sample
from diffusion.services import NonFiniteLossError
from diffusion.training import Trainer
from diffusion.utils import derive_seed
from mdlm.layout import build_layout, serialize_table
from mdlm.vocabulary import build_vocabulary, table_corpus
from metrics.services import evaluate
from numcodec.networks import FloatCodec, codec_hidden_width
from numcodec.services import (
    CodecConvergenceError, fit_table_normalizers, load_codec, pretrain_codec, save_codec,
)
from schedules.services import PowerMeanNoise
from tabular.generators import GENERATOR_VERSION, generate
from tabular.schema import preprocess
from tabular.services import (
    file_sha256, load_schema, read_json, read_table, sidecar_path, split, write_json,
    write_table,
)

from .checkpoints import (
    MODEL_FILE, CheckpointMismatchError, has_checkpoint, load_checkpoint, save_checkpoint,
)
from .config import SamplerSettings
from .models import ExperimentRun

logger = logging.getLogger(__name__)

# Failures a command reports as a CommandError
EXPERIMENT_ERRORS = (
    ValueError, OSError, ImproperlyConfigured, CodecConvergenceError, NonFiniteLossError,
)


class RunLedger:
    """Best-effort bookkeeping of command invocations in the database."""

    @staticmethod
    def start(command, config_hash='', seed=None, input_hashes=None):
        try:
            return ExperimentRun.objects.create(
                command=command,
                config_hash=config_hash,
                seed=seed,
                input_hashes=input_hashes or {},
            )
        except DatabaseError as exc:
            logger.warning(f"Run ledger unavailable, continuing without it: {exc}")
            return None

    @staticmethod
    def complete(run, artifact_path='', summary=None, input_hashes=None):
        if run is None:
            return
        try:
            run.mark_completed(artifact_path, summary, input_hashes)
        except DatabaseError as exc:
            logger.warning(f"Could not record completion of run {run.pk}: {exc}")

    @staticmethod
    def fail(run, error):
        if run is None:
            return
        try:
            run.mark_failed(error)
        except DatabaseError as exc:
            logger.warning(f"Could not record failure of run {run.pk}: {exc}")


def configure_runtime():
    if settings.TABDLM_NUM_THREADS:
        torch.set_num_threads(settings.TABDLM_NUM_THREADS)
    return torch.device(settings.TABDLM_DEVICE)


# gen-data

def generate_dataset(dataset, n, seed, out, train_fraction=None):
    """Write a generated table, its schema and manifest sidecars, and optional splits."""
    table = generate(dataset, n, seed)
    out = Path(out)
    write_table(table, out)
    manifest = {
        'command': 'gen_data',
        'dataset': dataset,
        'n': n,
        'seed': seed,
        'generator_version': GENERATOR_VERSION,
        'schema_hash': table.schema.schema_hash,
        'sha256': file_sha256(out),
    }
    if train_fraction is not None and train_fraction < 1.0:
        splits = {}
        for part, suffix in zip(split(table, train_fraction, seed), ('train', 'val')):
            path = out.with_name(f"{out.stem}.{suffix}.csv")
            write_table(part, path)
            splits[suffix] = {'path': path.name, 'rows': len(part), 'sha256': file_sha256(path)}
        manifest['train_fraction'] = train_fraction
        manifest['splits'] = splits
    write_json(sidecar_path(out, 'manifest'), manifest)
    return table, manifest


# pretrain-codec

def codec_output_path(out):
    out = Path(out)
    if out.is_dir() or not out.suffix:
        return out / 'codec.pt'
    return out


def pretrain_and_save_codec(run_config, out):
    codec_config = run_config.codec
    codec, stats = pretrain_codec(
        r=codec_config.latent_dim,
        epochs=codec_config.epochs,
        rng=codec_config.seed,
        polish_steps=codec_config.polish_steps,
        lr=codec_config.lr,
        strict=codec_config.strict,
    )
    out = codec_output_path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codec(codec, out)
    write_json(out.with_suffix('.json'), {
        'latent_dim': codec_config.latent_dim,
        'hidden_width': codec_hidden_width(codec_config.latent_dim),
        'roundtrip': stats.to_dict(),
        'seed': codec_config.seed,
        'config_hash': run_config.config_hash,
        'checksum': codec.checksum(),
    })
    return codec, stats, out


# train

def assemble_denoiser(run_config, codec, layout, vocab_size, device='cpu'):
    schedule = run_config.schedule
    noise = PowerMeanNoise(
        len(layout.numeric_names), schedule.sigma_min, schedule.sigma_max,
        rho_init=schedule.rho, learnable=schedule.learnable_rho,
    )
    denoiser = build_denoiser(
        codec, layout, vocab_size, run_config.backbone, noise,
        dropout=run_config.codec.projector_dropout,
        input_scaling=run_config.codec.input_scaling,
        dtype=run_config.torch_dtype,
    )
    return denoiser.to(device)


def restore_denoiser(bundle, device='cpu'):
    codec = FloatCodec(bundle.run_config.codec.latent_dim)
    denoiser = assemble_denoiser(bundle.run_config, codec, bundle.layout, len(bundle.vocabulary), device)
    denoiser.load_state_dict(bundle.state['model'])
    denoiser.eval()
    return denoiser


@dataclass
class TrainingRun:
    trainer: Trainer
    schema: object
    vocabulary: object
    layout: object
    normalizers: dict
    input_hashes: dict


def _validation_arrays(table, layout, vocabulary, normalizers, truncation):
    if table is None or len(table) == 0:
        return None
    return serialize_table(table, layout, vocabulary, normalizers, truncation=truncation)


def prepare_training(run_config, data, out, codec_path=None, resume=False, validation=None,
                     device='cpu'):
    """Build (or restore) everything a training run needs, without training yet."""
    data = Path(data)
    table = preprocess(read_table(data))
    input_hashes = {'data': file_sha256(data)}
    bundle = None

    if resume and has_checkpoint(out):
        bundle = load_checkpoint(out)
        if bundle.config_hash != run_config.config_hash:
            raise CheckpointMismatchError(
                f"Configuration hash {run_config.config_hash[:12]} differs from checkpoint "
                f"{bundle.config_hash[:12]}; refusing to resume"
            )
        bundle.check_schema(table.schema)
        bundle.check_vocabulary(build_vocabulary(table_corpus(table)))
        previous_data = bundle.metadata.get('input_hashes', {}).get('data')
        if previous_data and previous_data != input_hashes['data']:
            logger.warning(f"Resuming on different data than {out} was trained on (same schema and vocabulary)")
        vocabulary, layout, normalizers = bundle.vocabulary, bundle.layout, bundle.normalizers
        codec = FloatCodec(run_config.codec.latent_dim)
        input_hashes = {**bundle.metadata.get('input_hashes', {}), **input_hashes}
    else:
        if resume:
            logger.warning(f"No checkpoint at {out}, starting a fresh run")
        if codec_path:
            codec = load_codec(codec_path)
            input_hashes['codec'] = file_sha256(codec_path)
        else:
            codec, _, _ = pretrain_and_save_codec(run_config, Path(out) / 'codec.pt')
        vocabulary = build_vocabulary(table_corpus(table))
        layout = build_layout(table, vocabulary)
        normalizers = fit_table_normalizers(table, seed=run_config.training.seed)

    train_table, validation_table = table, None
    if run_config.train_fraction < 1.0:
        train_table, validation_table = split(table, run_config.train_fraction, run_config.training.seed)
    validation = validation or run_config.dataset.validation
    if validation:
        validation_table = preprocess(read_table(validation, table.schema))
        input_hashes['validation'] = file_sha256(validation)

    tokens, numbers = serialize_table(
        train_table, layout, vocabulary, normalizers, truncation=run_config.dataset.truncation,
    )
    torch.manual_seed(derive_seed(run_config.training.seed, 'init'))
    denoiser = assemble_denoiser(run_config, codec, layout, len(vocabulary), device)

    def save(trainer):
        save_checkpoint(
            out, trainer.state_dict(), run_config, table.schema, vocabulary, layout, normalizers,
            input_hashes=input_hashes,
            extra={'rows': {'train': len(train_table), 'validation': 0 if validation_table is None else len(validation_table)}},
        )

    trainer = Trainer(
        denoiser, run_config.training, tokens, numbers, layout, vocabulary.mask_id,
        mask_schedule=run_config.schedule.mask_schedule(),
        out_dir=out,
        validation=_validation_arrays(
            validation_table, layout, vocabulary, normalizers, run_config.dataset.validation_truncation,
        ),
        on_checkpoint=save,
    )
    if bundle is not None:
        trainer.load_state_dict(bundle.state)
    return TrainingRun(trainer, table.schema, vocabulary, layout, normalizers, input_hashes)


def run_training(run_config, data, out, codec_path=None, resume=False, max_steps=None,
                 validation=None, device='cpu'):
    """Train to the end of the schedule, or stop after `max_steps` total steps."""
    training = prepare_training(run_config, data, out, codec_path, resume, validation, device)
    report = training.trainer.run(until=max_steps)
    if report is None:
        logger.info(f"Nothing to train: already at step {training.trainer.step}")
    return training, report


# sample

def sampler_settings(bundle, **overrides):
    """The checkpoint's sampler section with command-line overrides applied."""
    values = asdict(bundle.run_config.sampler)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return SamplerSettings(**values)


def shard_ranges(n, workers, batch_size):
    """Contiguous (start, count) shards aligned to whole sampler batches."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    batches = math.ceil(n / batch_size)
    per_shard = math.ceil(batches / max(workers, 1)) * batch_size
    return [(start, min(per_shard, n - start)) for start in range(0, n, per_shard)]


def sample_records(bundle, sampler_config, start, count, device='cpu'):
    denoiser = restore_denoiser(bundle, device)
    return sample(denoiser, bundle.layout, bundle.vocabulary, sampler_config, count, start=start)


def sample_shard_payload(ckpt, settings_values, start, count):
    """JSON-ready shard of sampled records, as returned by the Celery task."""
    bundle = load_checkpoint(ckpt)
    config = SamplerSettings(**settings_values).sampler_config()
    result = sample_records(bundle, config, start, count, configure_runtime())
    return {
        'start': start,
        'tokens': result.tokens.tolist(),
        'numbers': result.numbers.tolist(),
        'dtype': str(result.numbers.dtype).removeprefix('torch.'),
    }


def merge_shards(payloads, num_features):
    payloads = sorted(payloads, key=lambda p: p['start'])
    tokens = torch.tensor([row for p in payloads for row in p['tokens']], dtype=torch.long)
    numbers = torch.tensor(
        [row for p in payloads for row in p['numbers']],
        dtype=getattr(torch, payloads[0].get('dtype', 'float64')),
    ).reshape(len(tokens), num_features)
    return SampleResult(tokens=tokens, numbers=numbers, masked_counts=[], start=payloads[0]['start'])


def write_samples(bundle, result, out, settings_used, n_requested):
    table, invalid = finalize(result, bundle.layout, bundle.vocabulary, bundle.schema, bundle.normalizers)
    out = Path(out)
    write_table(table, out)
    manifest = {
        'command': 'sample',
        'checkpoint': str(bundle.path),
        'checkpoint_step': bundle.step,
        'config_hash': bundle.config_hash,
        'input_hashes': {'model': file_sha256(Path(bundle.path) / MODEL_FILE)},
        'n_requested': n_requested,
        'n_valid': len(table),
        'invalid_records': invalid,
        'sampler': asdict(settings_used),
        'sha256': file_sha256(out),
    }
    write_json(sidecar_path(out, 'manifest'), manifest)
    return table, invalid, manifest


# eval

def evaluate_files(real, synth, schema_path=None, report_path=None, as_json=False):
    schema = load_schema(schema_path) if schema_path else None
    real_table = read_table(real, schema)
    synth_table = read_table(synth, schema)
    manifest_path = sidecar_path(synth, 'manifest')
    invalid = read_json(manifest_path).get('invalid_records', 0) if manifest_path.exists() else 0
    report = evaluate(real_table, synth_table, invalid_records=invalid)
    if report_path:
        report_path = Path(report_path)
        if as_json or report_path.suffix == '.json':
            write_json(report_path, report.to_dict())
        else:
            report_path.parent.mkdir(parents=True, exist_ok=True)
            report_path.write_text(report.render(), encoding='utf-8')
            write_json(report_path.with_suffix('.json'), report.to_dict())
    return report, {'real': file_sha256(real), 'synth': file_sha256(synth)}


def percent_summary(report):
    def percent(value):
        return None if value is None else round(100 * value, 2)

    summary = {'shape': percent(report.shape), 'trend': percent(report.trend)}
    summary.update({k: percent(v) for k, v in report.match_rates.items()})
    summary['invalid_records'] = report.invalid_records
    return summary
