from dataclasses import asdict
import logging

from celery import group, shared_task
from django.conf import settings

from .services import (
    configure_runtime, merge_shards, sample_records, sample_shard_payload, shard_ranges,
)

logger = logging.getLogger(__name__)


@shared_task
def sample_shard(ckpt, settings_values, start, count):
    """Sample records start .. start+count-1 from a checkpoint bundle."""
    logger.info(f"Sampling shard {start}..{start + count - 1} from {ckpt}")
    return sample_shard_payload(ckpt, settings_values, start, count)


def sample_in_shards(bundle, sampler, n, workers=1):
    """Sample n records, fanning shards out to Celery workers when a broker is configured.

    Every record draws from its own (seed, index) stream, so the result is
    the same however the range is sharded.
    """
    if workers > 1 and settings.CELERY_BROKER_URL:
        ranges = shard_ranges(n, workers, sampler.batch_size)
        job = group(sample_shard.s(str(bundle.path), asdict(sampler), start, count) for start, count in ranges)
        payloads = job.apply_async().get()
        logger.info(f"Collected {len(payloads)} shards from Celery workers")
        return merge_shards(payloads, len(bundle.layout.numeric_names))
    if workers > 1:
        logger.warning("No Celery broker configured, sampling in-process")
    return sample_records(bundle, sampler.sampler_config(), 0, n, configure_runtime())
