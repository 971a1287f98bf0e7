import hashlib

import torch

SEED_MODULUS = 2 ** 63


def derive_seed(*parts):
    """Stable 63-bit seed from any sequence of ints/strings."""
    key = ':'.join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(key.encode('utf-8')).digest()[:8], 'big') % SEED_MODULUS


def make_generator(seed, device='cpu'):
    generator = torch.Generator(device=device)
    generator.manual_seed(seed)
    return generator
