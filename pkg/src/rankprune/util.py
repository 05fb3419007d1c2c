"""Small shared helpers."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path


def round_half_up(x: float) -> int:
    """Round to the nearest integer, halves away from zero (x must be >= 0)."""
    return int(math.floor(x + 0.5))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    """Stable, human-readable JSON used for manifests and reports."""
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
