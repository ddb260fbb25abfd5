from __future__ import annotations

import hashlib
import json
import logging
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from rich.logging import RichHandler

_LOG_FILE_LOCK = threading.Lock()


class SpotMambaError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(SpotMambaError, ValueError):
    pass


class ConfigError(SpotMambaError, ValueError):
    pass


class DataError(SpotMambaError, ValueError):
    pass


class NumericError(SpotMambaError, ArithmeticError):
    pass


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Return an independent generator for the substream identified by `keys`.
    Equal (seed, keys) always give the same stream, regardless of call order.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def hash_files(paths: Iterable[Path]) -> str:
    """SHA-256 over the contents of `paths`, in the order given."""
    hasher = hashlib.sha256()
    for p in paths:
        hasher.update(Path(p).name.encode("utf-8"))
        with Path(p).open("rb") as f:
            while chunk := f.read(8192):
                hasher.update(chunk)
    return hasher.hexdigest()


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(show_path=False, rich_tracebacks=False)],
        force=True,
    )


def log_event(log_file: Optional[Path], event: str, level: str = "info", **fields) -> None:
    """Append one JSONL entry to `log_file`; a no-op when no file was requested."""
    if not log_file:
        return
    entry = {"ts": datetime.now(timezone.utc).isoformat(), "level": level, "event": event}
    entry.update(fields)
    line = json.dumps(entry, default=_json_default) + "\n"
    # one writer at a time; lines never interleave
    with _LOG_FILE_LOCK, Path(log_file).open("a", encoding="utf-8") as f:
        f.write(line)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return obj.as_posix()
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def ensure_finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NumericError(f"{name}: {bad} non-finite value(s)")
