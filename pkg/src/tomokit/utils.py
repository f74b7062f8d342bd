"""Small helpers shared by the pipelines: logging setup, thread caps, seeds, run manifests."""

import hashlib
import json
import logging
import os
import platform
import sys
from datetime import datetime, timezone
from typing import Dict, Iterable, List, Optional

import numpy as np

from .version import __version__

THREADS_ENV = "TOMOKIT_THREADS"

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def configure_logging(verbosity: int = 0) -> None:
    """Install a single stderr handler on the root logger.

    Args:
        verbosity: -1 quiet (warnings only), 0 info, 1+ debug
    """
    if verbosity < 0:
        level = logging.WARNING
    elif verbosity == 0:
        level = logging.INFO
    else:
        level = logging.DEBUG
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%H:%M:%S"))
    root.addHandler(handler)
    root.setLevel(level)


def resolve_threads(requested: Optional[int] = None) -> int:
    """Worker cap: explicit value, else TOMOKIT_THREADS, else CPU count."""
    if requested is not None and requested > 0:
        return requested
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            value = int(env)
        except ValueError:
            logging.getLogger(__name__).warning(
                "ignoring non-integer %s=%r", THREADS_ENV, env)
        else:
            if value > 0:
                return value
    return os.cpu_count() or 1


def spawn_seeds(seed: int, count: int) -> List[np.random.SeedSequence]:
    """Independent child seeds, one per work item, stable for a given parent seed."""
    return np.random.SeedSequence(seed).spawn(count)


def sha256_file(path: str, block_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            block = f.read(block_size)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def write_manifest(output_dir: str, command: str, config_text: str,
                   inputs: Iterable[str] = (), extra: Optional[Dict] = None) -> str:
    """Write config echo and provenance next to a run's outputs.

    Returns:
        Path of the written manifest.json
    """
    os.makedirs(output_dir, exist_ok=True)
    with open(os.path.join(output_dir, "config.ini"), "w", encoding="utf-8") as f:
        f.write(config_text)
    manifest = {
        "tool": "tomokit",
        "version": __version__,
        "command": command,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": datetime.now(timezone.utc).isoformat(),
        "inputs": {os.path.abspath(p): sha256_file(p) for p in inputs if os.path.isfile(p)},
        "config": config_text,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(output_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return path
