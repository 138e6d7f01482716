"""Input validation helpers shared by the estimators and signal code."""

from __future__ import annotations

import contextlib
import os
import tempfile
from pathlib import Path

import numpy as np


def check_finite(x, name: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf")


def check_shape(x, shape: tuple, name: str = "input") -> None:
    """Compare ``x.shape`` with ``shape``; ``None`` entries match anything."""
    got = tuple(x.shape)
    if len(got) != len(shape) or any(s is not None and s != g for s, g in zip(shape, got)):
        raise ValueError(f"{name} has shape {got}, expected {shape}")


def check_same_shape(arrays, name: str = "inputs") -> None:
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"{name} have mismatched shapes {sorted(shapes)}")


def check_samples(samples, min_speakers: int = 2) -> list:
    """Validate a sequence of MixtureSample-like items for fitting."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples given")
    for s in samples:
        if len(s.sources) < min_speakers:
            raise ValueError(f"samples need at least {min_speakers} sources")
    shapes = {s.mixture.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples must share one spectrogram shape (found {sorted(shapes)})")
    return samples


@contextlib.contextmanager
def atomic_write(path, mode: str = "wb"):
    """Yield a temp file handle; rename it onto ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
