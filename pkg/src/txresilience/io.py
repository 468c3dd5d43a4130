"""Atomic file output, delimited tables and content manifests."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Callable, Iterable

import pandas as pd

FLOAT_FORMAT = "%.12g"


def atomic_write(path: str | Path, writer: Callable[[object], None], mode: str = "w") -> Path:
    """Write via ``writer(handle)`` to a temporary sibling, then rename.

    Readers see either the previous file or the complete new one, never a
    partial write.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({"encoding": "utf-8", "newline": ""} if "b" not in mode else {})) as fh:
            writer(fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def write_text(path: str | Path, text: str) -> Path:
    return atomic_write(path, lambda fh: fh.write(text))


def write_table(frame: pd.DataFrame, path: str | Path) -> Path:
    return atomic_write(path, lambda fh: frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))


def write_records(frame: pd.DataFrame, path: str | Path) -> Path:
    """One JSON object per line, columns in frame order."""
    return atomic_write(path, lambda fh: frame.to_json(fh, orient="records", lines=True, date_format="iso", double_precision=12))


TABLE_FORMATS = {"csv": (".csv", write_table), "jsonl": (".jsonl", write_records)}


def write_json(obj, path: str | Path) -> Path:
    return write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def read_table(path: str | Path, **kwargs) -> pd.DataFrame:
    return pd.read_csv(path, **kwargs)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def build_manifest(root: str | Path, files: Iterable[str | Path]) -> dict[str, str]:
    """Relative path -> sha256 for every file, sorted by path."""
    root = Path(root)
    out = {}
    for f in files:
        p = Path(f)
        p = p if p.is_absolute() else root / p
        out[p.relative_to(root).as_posix()] = sha256_file(p)
    return dict(sorted(out.items()))
