from __future__ import annotations

import os
import shutil
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List

import numpy as np

from app.errors import ValidationError

FLOAT_FORMAT = "%.17g"


def chain_rngs(seed: int, count: int) -> List[np.random.Generator]:
    """Independent generator streams derived from (seed, index)."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]


def ensure_writable(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ValidationError(f"Output directory {path} already exists; pass --force to overwrite.")


@contextmanager
def atomic_output_dir(path: str | Path, force: bool = False) -> Iterator[Path]:
    """Yield a staging directory that replaces ``path`` only if the block succeeds."""
    target = Path(path)
    ensure_writable(target, force)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = target.parent / f".{target.name}.staging-{os.getpid()}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir()
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(staging, target)


def atomic_write_text(path: str | Path, text: str, force: bool = False) -> Path:
    """Write ``text`` to ``path`` through a sibling temporary file."""
    target = Path(path)
    if target.exists() and not force:
        raise ValidationError(f"Output file {target} already exists; pass --force to overwrite.")
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = target.parent / f".{target.name}.staging-{os.getpid()}"
    staging.write_text(text, encoding="utf-8")
    os.replace(staging, target)
    return target
