"""CSV serialisation of surfaces, parameters, traces and forecasts.

All files are UTF-8 with LF line endings; floats use Python's shortest
round-trip ``repr`` so values re-read bit-for-bit.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import LexisWindow

__all__ = [
    "fmt",
    "write_rows",
    "read_rows",
    "write_grid",
    "read_grid",
]


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_rows(path, header, rows) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def read_rows(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader if row]


def write_grid(path, window: LexisWindow, grid, value_name: str = "value") -> None:
    """Write a window grid as ``t,x,<value_name>`` rows."""
    grid = np.asarray(grid)
    rows = ((int(t), int(x), float(grid[i, j])) for i, t in enumerate(window.years) for j, x in enumerate(window.ages))
    write_rows(path, ["t", "x", value_name], rows)


def read_grid(path) -> tuple[LexisWindow, np.ndarray]:
    """Inverse of :func:`write_grid`."""
    _, rows = read_rows(path)
    ts = [int(r[0]) for r in rows]
    xs = [int(r[1]) for r in rows]
    window = LexisWindow(min(ts), max(ts), min(xs), max(xs))
    grid = np.full(window.shape, np.nan)
    for t, x, r in zip(ts, xs, rows):
        grid[t - window.t_min, x - window.x_min] = float(r[2])
    return window, grid
