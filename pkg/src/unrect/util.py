"""Small shared helpers."""
from __future__ import annotations

import os

from .errors import ValidationError


def worker_count(requested: int | None = None) -> int:
    """Resolve how many worker threads batch helpers may use.

    The UNRECT_THREADS environment variable caps the value; unset falls back
    to the hardware thread count. Per-pixel math stays deterministic
    regardless because parallelism is only ever applied across independent
    frames or rows.
    """
    cap = os.environ.get("UNRECT_THREADS", "")
    try:
        cap_n = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        raise ValidationError(f"UNRECT_THREADS must be an integer, got {cap!r}")
    if cap_n < 1:
        raise ValidationError(f"UNRECT_THREADS must be >= 1, got {cap_n}")
    if requested is None:
        return cap_n
    if requested < 1:
        raise ValidationError(f"worker count must be >= 1, got {requested}")
    return min(requested, cap_n)


def require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)
