"""Small deterministic helpers: seed derivation, hashing, atomic file writes."""

from __future__ import annotations

import hashlib
import os


def stable_seed(*parts: object) -> int:
    """Derive a 63-bit seed from a tuple of labels.

    Independent streams (per stage, per epoch, per grid cell) are keyed by
    name instead of drawn from one sequential RNG, so resuming a run does not
    shift any stream.
    """
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_text_atomic(path: str, text: str) -> None:
    """Write via a temp file + rename so readers never see a partial file."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_bytes_atomic(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
