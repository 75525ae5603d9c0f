"""
Utility functions shared across the package.

This module collects the small helpers every other module leans on:
- The package-wide exception root (`DMLError`)
- Logging setup with a rich console handler and an optional rotating file
- Human-readable byte counts for parameter and buffer accounting
- Directory creation for run outputs
- Seeded random substreams derived from (seed, step, ...) so that results
  never depend on the order in which work happens
"""

from __future__ import annotations

import logging
import time
from collections.abc import Iterator
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from rich.logging import RichHandler

if TYPE_CHECKING:
    from .config import LoggingConfig


class DMLError(Exception):
    """Base exception for every error raised by this package."""


def setup_logging(config: LoggingConfig) -> None:
    """
    Configure the root logger from a LoggingConfig.

    The console always gets a RichHandler. When `config.file_path` is set a
    size-rotating file handler is added as well, using the configured format
    string, so long training runs leave a plain-text trail next to the
    metrics CSV.

    Args:
        config: Logging section of the experiment configuration
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(config.level.upper())

    console = RichHandler(show_path=False, rich_tracebacks=True)
    console.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(console)

    if config.file_path:
        log_path = Path(config.file_path)
        ensure_directory(log_path.parent)
        file_handler = RotatingFileHandler(
            log_path,
            maxBytes=parse_size(config.max_file_size),
            backupCount=config.backup_count,
            encoding="utf-8",
        )
        file_handler.setFormatter(logging.Formatter(config.format_string))
        root.addHandler(file_handler)


def parse_size(size: str) -> int:
    """
    Parse a size string such as "10MB" or "512KB" into bytes.

    Example:
        >>> parse_size("10MB")
        10485760
    """
    units = {"B": 1, "KB": 1024, "MB": 1024**2, "GB": 1024**3}
    text = size.strip().upper()
    for suffix in sorted(units, key=len, reverse=True):
        if text.endswith(suffix):
            number = text[: -len(suffix)].strip()
            return int(float(number) * units[suffix])
    return int(text)


def format_bytes(size_bytes: int) -> str:
    """
    Convert a byte count to a human-readable string.

    Used for parameter-buffer accounting in the compare table and the
    paging summary.

    Args:
        size_bytes: Size in bytes

    Returns:
        Human-readable string like "1.5 KB" or "50.0 MB"

    Example:
        >>> format_bytes(1536)
        '1.5 KB'
    """
    if size_bytes == 0:
        return "0 B"
    if size_bytes < 0:
        return "Invalid size"

    size_units = ["B", "KB", "MB", "GB", "TB"]
    size = float(size_bytes)
    unit_index = 0
    while size >= 1024 and unit_index < len(size_units) - 1:
        size /= 1024.0
        unit_index += 1
    return f"{size:.1f} {size_units[unit_index]}"


def format_count(count: int) -> str:
    """Format a parameter count compactly (e.g. "1.48M", "12.3K")."""
    if count >= 1_000_000:
        return f"{count / 1_000_000:.2f}M"
    if count >= 1_000:
        return f"{count / 1_000:.1f}K"
    return str(count)


def ensure_directory(path: str | Path) -> Path:
    """
    Ensure a directory exists, creating it if necessary.

    Args:
        path: Directory path as string or Path object

    Returns:
        Path object representing the directory

    Raises:
        OSError: If the directory cannot be created
    """
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        return directory
    except PermissionError:
        raise OSError(f"Permission denied: Cannot create directory '{directory}'")
    except OSError as e:
        raise OSError(f"Failed to create directory '{directory}': {e}")


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Build a generator for one named substream of a run.

    Every random decision that happens at a given training step (augmentation,
    in-class accumulation order) draws from `derive_rng(seed, tag, step)`.
    Results therefore depend only on the seed and the step index, never on
    which thread produced the batch or whether the run was resumed.

    Args:
        seed: Run seed
        *stream: Integers identifying the substream (tag, step, ...)

    Returns:
        A fresh numpy Generator
    """
    return np.random.default_rng([seed, *stream])


@contextmanager
def stopwatch() -> Iterator[list[float]]:
    """
    Measure wall-clock time of a block in milliseconds.

    Example:
        >>> with stopwatch() as elapsed:
        ...     do_work()
        >>> elapsed[0]  # milliseconds
    """
    elapsed: list[float] = [0.0]
    start = time.perf_counter()
    try:
        yield elapsed
    finally:
        elapsed[0] = (time.perf_counter() - start) * 1000.0
