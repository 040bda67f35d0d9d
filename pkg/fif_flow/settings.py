"""
Environment-driven settings for FIF Flow.
Values come from the process environment or the package .env file.
"""

import os
from pathlib import Path


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


def num_threads() -> int:
    """Upper bound on worker processes for multi-run sweeps (FIF_NUM_THREADS)."""
    raw = os.getenv("FIF_NUM_THREADS")
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        print(f"[Settings] Ignoring invalid FIF_NUM_THREADS={raw!r}")
        return os.cpu_count() or 1
    return max(1, value)


def output_root() -> Path:
    """Default parent directory for run outputs (FIF_OUTPUT_ROOT)."""
    return Path(os.getenv("FIF_OUTPUT_ROOT", "runs"))


def verbose() -> bool:
    """Whether progress lines are printed (FIF_VERBOSE)."""
    return _env_flag("FIF_VERBOSE", "1")


def effective_jobs(requested: int) -> int:
    """Clamp a requested --jobs value to [1, FIF_NUM_THREADS]."""
    return max(1, min(int(requested), num_threads()))
