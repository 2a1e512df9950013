"""Stable derivation of per-purpose seeds from one run seed.

Python's builtin hash is salted per process, so sub-seeds are derived with
SHA-256 to keep runs reproducible across sessions.
"""

from __future__ import annotations

import hashlib


def derive_seed(base: int, *tags: object) -> int:
    """A 63-bit seed deterministically derived from ``base`` and tags."""
    material = repr((int(base),) + tuple(str(t) for t in tags)).encode()
    digest = hashlib.sha256(material).digest()
    return int.from_bytes(digest[:8], "big") >> 1
