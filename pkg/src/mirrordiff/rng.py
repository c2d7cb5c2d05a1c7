"""Deterministic random streams.

Every stochastic operation in the package draws from a Philox counter-based
generator. Independent streams are derived from a user seed plus a chain of
string or integer tags, so the same seed reproduces the same draws regardless
of how the surrounding computation is split up (per-chain sampling, per-step
training batches, per-trial metric seeds).
"""

from __future__ import annotations

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    if isinstance(tag, str):
        # Stable across platforms and interpreter runs (unlike hash()).
        return int.from_bytes(tag.encode("utf-8"), "little")
    raise TypeError(f"stream tags must be int or str, got {type(tag).__name__}")


def stream(seed: int, *tags) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed`` and a tag chain."""
    entropy = [_tag_to_int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
