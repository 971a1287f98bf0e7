"""
Checkpoint bundles.

A bundle is a directory:

    model.pt          format_version, step, model/optimizer/scheduler state
    metadata.json     format_version, config + hash, schema/vocabulary hashes, seeds
    vocabulary.json
    layout.json
    schema.json
    normalizers.json
"""
from dataclasses import dataclass
import logging
import os
from pathlib import Path

import torch

from mdlm.layout import TokenLayout
from mdlm.vocabulary import Vocabulary
from numcodec.services import normalizers_from_state, normalizers_state
from tabular.services import load_schema, read_json, save_schema, write_json

from .config import run_config_from_dict

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MODEL_FILE = 'model.pt'
METADATA_FILE = 'metadata.json'


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class CheckpointBundle:
    path: Path
    metadata: dict
    run_config: object
    schema: object
    vocabulary: Vocabulary
    layout: TokenLayout
    normalizers: dict
    state: dict

    @property
    def step(self):
        return self.state['step']

    @property
    def config_hash(self):
        return self.metadata['config_hash']

    def check_schema(self, schema):
        """Refuse data whose schema differs from the one the model was trained on."""
        if schema.schema_hash != self.metadata['schema_hash']:
            raise CheckpointMismatchError(
                f"Schema hash {schema.schema_hash[:12]} does not match checkpoint "
                f"{self.metadata['schema_hash'][:12]} at {self.path}"
            )

    def check_vocabulary(self, vocabulary):
        if vocabulary.vocabulary_hash != self.metadata['vocabulary_hash']:
            raise CheckpointMismatchError(
                f"Vocabulary hash {vocabulary.vocabulary_hash[:12]} does not match checkpoint at {self.path}"
            )


def save_checkpoint(out_dir, state, run_config, schema, vocabulary, layout, normalizers,
                    input_hashes=None, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / MODEL_FILE
    partial = out_dir / (MODEL_FILE + '.partial')
    torch.save({'format_version': FORMAT_VERSION, **state}, partial)
    os.replace(partial, model_path)

    write_json(out_dir / 'vocabulary.json', vocabulary.to_dict())
    write_json(out_dir / 'layout.json', layout.to_dict())
    save_schema(schema, out_dir / 'schema.json')
    write_json(out_dir / 'normalizers.json', normalizers_state(normalizers))
    metadata = {
        'format_version': FORMAT_VERSION,
        'config': run_config.to_dict(),
        'config_hash': run_config.config_hash,
        'schema_hash': schema.schema_hash,
        'vocabulary_hash': vocabulary.vocabulary_hash,
        'step': state['step'],
        'seeds': {
            'training': run_config.training.seed,
            'codec': run_config.codec.seed,
            'sampler': run_config.sampler.seed,
        },
        'input_hashes': input_hashes or {},
        **(extra or {}),
    }
    write_json(out_dir / METADATA_FILE, metadata)
    logger.info(f"Saved checkpoint at step {state['step']} to {out_dir}")
    return out_dir


def has_checkpoint(path):
    path = Path(path)
    return (path / METADATA_FILE).exists() and (path / MODEL_FILE).exists()


def load_checkpoint(path, map_location='cpu'):
    path = Path(path)
    if not has_checkpoint(path):
        raise CheckpointMismatchError(f"No checkpoint bundle at {path}")
    metadata = read_json(path / METADATA_FILE)
    if metadata.get('format_version') != FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"Unsupported checkpoint format {metadata.get('format_version')} at {path}"
        )
    schema = load_schema(path / 'schema.json')
    vocabulary = Vocabulary.from_dict(read_json(path / 'vocabulary.json'))
    state = torch.load(path / MODEL_FILE, map_location=map_location, weights_only=True)
    if state.get('format_version') != FORMAT_VERSION:
        raise CheckpointMismatchError(f"Model file at {path} has format {state.get('format_version')}")

    bundle = CheckpointBundle(
        path=path,
        metadata=metadata,
        run_config=run_config_from_dict(metadata['config']),
        schema=schema,
        vocabulary=vocabulary,
        layout=TokenLayout.from_dict(read_json(path / 'layout.json')),
        normalizers=normalizers_from_state(read_json(path / 'normalizers.json')),
        state=state,
    )
    bundle.check_schema(schema)
    bundle.check_vocabulary(vocabulary)
    if bundle.run_config.config_hash != bundle.config_hash:
        raise CheckpointMismatchError(f"Stored configuration at {path} does not match its hash")
    logger.info(f"Loaded checkpoint from {path} at step {bundle.step}")
    return bundle
