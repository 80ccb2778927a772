"""Validation helpers, digests and atomic file writes."""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from numbers import Integral, Real
from pathlib import Path

from .exceptions import PreconditionError


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, Integral) or value < 1:
        raise PreconditionError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_unit_interval(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, Real) or not 0.0 <= value <= 1.0:
        raise PreconditionError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def check_finite(value, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise PreconditionError(f"{name} must be finite, got {value!r}")
    return value


def canonical_json(obj) -> str:
    """JSON with sorted keys and no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def digest(obj) -> str:
    """sha256 hex digest of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))
