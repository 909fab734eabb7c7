"""
Utilities for the noise source estimator.

Shared helpers: environment loading, key-value text files (dataset manifests,
record sidecars, session manifests, config files), seeded random streams and
content hashing.
"""

import os
import hashlib
import logging
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union

import numpy as np
from dotenv import dotenv_values, load_dotenv

logger = logging.getLogger("nse-utils")

PathLike = Union[str, Path]


def load_env_file(env_file: Optional[str] = None) -> bool:
    """
    Load environment variables from a .env file.

    Args:
        env_file: Path to .env file. If not provided, looks for ./.env.

    Returns:
        bool: True if environment variables were loaded, False otherwise.
    """
    if not env_file and os.path.exists(".env"):
        env_file = ".env"

    if env_file and os.path.exists(env_file):
        logger.info(f"Loading environment variables from {env_file}")
        return load_dotenv(env_file, override=True)

    return False


def read_key_value_file(path: PathLike) -> Dict[str, str]:
    """
    Read a UTF-8 key=value text file.

    Blank lines and lines starting with '#' are skipped. Values keep their
    text form; callers convert.
    """
    values = dotenv_values(path, encoding="utf-8")
    return {k: v for k, v in values.items() if v is not None}


def write_key_value_file(path: PathLike, values: Mapping[str, object], header: Optional[str] = None) -> None:
    """Write a key=value text file in a stable key order."""
    lines = []
    if header:
        lines.extend(f"# {line}" for line in header.splitlines())
    for key, value in values.items():
        lines.append(f"{key}={format_value(value)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_value(value: object) -> str:
    """Text form that round-trips floats exactly."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Seeded generator for a named substream.

    `make_rng(seed, i)` and `make_rng(seed, j)` are independent for i != j and
    do not depend on how many other substreams were drawn before.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) & 0xFFFFFFFFFFFFFFFF for s in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *stream: int) -> int:
    """64-bit child seed of (seed, *stream)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) & 0xFFFFFFFFFFFFFFFF for s in stream]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def hash_files(paths: Iterable[PathLike]) -> str:
    """SHA-256 over the names and bytes of the given files, in the given order."""
    digest = hashlib.sha256()
    for path in paths:
        path = Path(path)
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def hash_directory(directory: PathLike) -> str:
    """SHA-256 over every regular file below `directory`, sorted by relative path."""
    root = Path(directory)
    files = sorted(p for p in root.rglob("*") if p.is_file())
    digest = hashlib.sha256()
    for path in files:
        digest.update(str(path.relative_to(root)).encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()
