"""Counter-based, splittable random streams.

A stream is addressed by (seed_base, experiment_id, replica, purpose) and is
realized as a Philox generator keyed by a SHA-256 digest of that path.
Replica-level determinism is therefore independent of batching and thread
scheduling.
"""

import hashlib

import numpy as np

PURPOSE_FIELD = "field"
PURPOSE_EDGES = "edges"
PURPOSE_INTERIOR = "interior"


def stream_key(seed_base: int, experiment_id: str, replica: int, purpose: str) -> int:
    payload = f"{seed_base}|{experiment_id}|{replica}|{purpose}".encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed_base: int, experiment_id: str, replica: int, purpose: str):
    """A numpy Generator for one (replica, purpose) cell."""
    key = stream_key(seed_base, experiment_id, replica, purpose)
    return np.random.Generator(np.random.Philox(key=key))
