"""Shared helpers: formatting, config hashing, worker limits, aggregation."""

import hashlib
import json
import os
from collections.abc import Iterable, Mapping

import numpy as np

THREADS_ENV_VAR = "ODESIG_THREADS"


def format_seconds(seconds: float) -> str:
    """Format a duration as `850ms`, `12.3s`, `MM:SS` or `HH:MM:SS`."""
    if seconds < 1:
        return f"{seconds * 1000:.0f}ms"
    if seconds < 60:
        return f"{seconds:.1f}s"
    hours = int(seconds // 3600)
    minutes = int((seconds % 3600) // 60)
    secs = int(seconds % 60)

    if hours > 0:
        return f"{hours:02d}:{minutes:02d}:{secs:02d}"
    return f"{minutes:02d}:{secs:02d}"


def deep_merge(base: Mapping, override: Mapping) -> dict:
    """Recursively merge `override` into a copy of `base` (override wins)."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def config_hash(config: Mapping) -> str:
    """SHA-256 of the config's canonical JSON form."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def worker_count(configured: int | None = None) -> int:
    """Worker cap: ODESIG_THREADS, else `configured`, else 1."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass  # malformed env var falls back to config
    return max(1, int(configured or 1))


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    """Mean and population std (0 for a single value)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mean_std of no values")
    return float(arr.mean()), float(arr.std())
