"""Deterministic sub-seed derivation from one root seed."""

import hashlib


def derive_seed(root: int, purpose: str) -> int:
    """Stable across runs and platforms: root + sha256(purpose) truncated."""
    h = int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:4], "little")
    return (int(root) + h) % (2**32)
