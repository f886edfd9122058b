"""Shared plumbing: seed derivation, canonical hashing, worker-count policy."""

import hashlib
import json
import os

import numpy as np


def derive_seed(master_seed, *parts):
    """Stable 64-bit seed derived from a master seed and a label path.

    Uses blake2b over the decimal master seed and the stringified parts, so the
    same (master_seed, parts) always yields the same stream on any platform.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(master_seed, *parts):
    return np.random.default_rng(derive_seed(master_seed, *parts))


def canonical_json(obj):
    """Deterministic JSON encoding: sorted keys, no whitespace drift."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def body_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def worker_count():
    """Worker cap for per-utterance parallel loops.

    REVOICER_THREADS wins when set; otherwise the CPU count. Always >= 1.
    """
    env = os.environ.get("REVOICER_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError as exc:
            raise ValueError(f"REVOICER_THREADS must be an integer, got {env!r}") from exc
        return max(1, n)
    return max(1, os.cpu_count() or 1)
