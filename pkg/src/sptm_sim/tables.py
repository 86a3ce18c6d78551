"""Loader for the rule tables shipped under ``data/``.

Format: UTF-8 text, one record per line, fields separated by a single TAB.
Lines starting with ``#`` are comments. The first non-comment line names the
columns. ``-`` marks an empty cell; list cells are comma separated.
"""
import functools
from importlib import resources
from pathlib import Path

from .errors import DataError

EMPTY = "-"


def data_dir():
    return Path(str(resources.files(__package__) / "data"))


def read_rows(path):
    path = Path(path)
    header = None
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.split("\t")
        if header is None:
            header = cells
            continue
        if len(cells) != len(header):
            raise DataError(f"{path.name}:{lineno}: expected {len(header)} fields, got {len(cells)}")
        rows.append(dict(zip(header, cells)))
    if header is None:
        raise DataError(f"{path.name}: no header line")
    return rows


@functools.lru_cache(maxsize=None)
def load(name):
    """Rows of a packaged table as a tuple of dicts (cached, treat as read-only)."""
    return tuple(read_rows(data_dir() / f"{name}.tsv"))


def num(cell):
    """Parse a decimal or 0x-prefixed cell; ``-`` gives None."""
    if cell == EMPTY:
        return None
    return int(cell, 0)


def names(cell):
    if cell == EMPTY:
        return []
    return [c for c in cell.split(",") if c]
