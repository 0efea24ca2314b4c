"""Reader and writer for Human Mortality Database period 1x1 text tables.

Layout::

    United States of America, Deaths (period 1x1)   Last modified: ...
    <blank line>
      Year      Age       Female       Male        Total
      1950       0       49153.02    65624.77   114777.79
      ...
      1950     110+          5.36        1.02        6.38

Ages are integers except the open interval ``110+`` (read as 110); missing
values are written as ``.``.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError, StructuralError

__all__ = ["Column", "HMDTable", "parse_hmd_table", "read_hmd_file", "format_hmd_table"]

_YEAR = re.compile(r"^\d{3,4}$")
MISSING = math.nan


class Column(str, enum.Enum):
    FEMALE = "Female"
    MALE = "Male"
    TOTAL = "Total"

    @classmethod
    def parse(cls, name) -> "Column":
        if isinstance(name, Column):
            return name
        key = str(name).strip().lower()
        for col in cls:
            if col.value.lower() == key or col.value[0].lower() == key:
                return col
        raise ValueError(f"unknown sex column {name!r}; expected Female, Male or Total")


_COLUMN_INDEX = {Column.FEMALE: 2, Column.MALE: 3, Column.TOTAL: 4}


@dataclass(frozen=True, eq=False)
class HMDTable:
    """One column of an HMD table as ``{(year, age): value}``; missing values are NaN."""

    column: Column
    values: dict

    @property
    def years(self) -> list[int]:
        return sorted({t for t, _ in self.values})

    @property
    def ages(self) -> list[int]:
        return sorted({x for _, x in self.values})

    def triples(self) -> list[tuple[int, int, float]]:
        return [(t, x, v) for (t, x), v in sorted(self.values.items())]

    def is_missing(self, t: int, x: int) -> bool:
        v = self.values.get((t, x))
        return v is None or math.isnan(v)


def _parse_age(token: str, lineno: int) -> int:
    if token.endswith("+"):
        token = token[:-1]
    try:
        age = int(token)
    except ValueError:
        raise ParseError(f"unparsable age {token!r}", lineno) from None
    if age < 0:
        raise ParseError(f"negative age {age}", lineno)
    return age


def _parse_value(token: str, lineno: int) -> float:
    if token == ".":
        return MISSING
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"unparsable number {token!r}", lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {token!r}", lineno)
    return value


def _check_contiguous(values: list[int], what: str) -> None:
    if values and values != list(range(values[0], values[-1] + 1)):
        missing = sorted(set(range(values[0], values[-1] + 1)) - set(values))
        raise StructuralError(f"{what} are not contiguous; missing {missing[:5]}")


def parse_hmd_table(text: str, column="Total") -> HMDTable:
    """Parse an HMD period 1x1 table and extract one sex column.

    Parameters
    ----------
    text : str
        Full file content.
    column : {"Female", "Male", "Total"}

    Returns
    -------
    HMDTable

    Raises
    ------
    ParseError
        Malformed record; the message carries the 1-based line number.
    StructuralError
        Years or ages are not contiguous, or a cell appears twice.
    """
    column = Column.parse(column)
    idx = _COLUMN_INDEX[column]
    lines = text.splitlines()

    # Descriptive header: everything up to the first blank line, unless the
    # file starts directly with records.
    start = 0
    first = next((ln for ln in lines if ln.strip()), "")
    if not _YEAR.match(first.split()[0] if first.split() else ""):
        for k, ln in enumerate(lines):
            if not ln.strip():
                start = k + 1
                break
        else:
            raise ParseError("no blank line separating header from records", 1)

    values: dict[tuple[int, int], float] = {}
    for k in range(start, len(lines)):
        lineno = k + 1
        fields = lines[k].split()
        if not fields:
            continue
        if fields[0].lower() == "year":
            continue
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields (Year Age Female Male Total), got {len(fields)}", lineno)
        if not _YEAR.match(fields[0]):
            raise ParseError(f"unparsable year {fields[0]!r}", lineno)
        key = (int(fields[0]), _parse_age(fields[1], lineno))
        # validate every numeric field, not only the requested one
        parsed = [_parse_value(tok, lineno) for tok in fields[2:]]
        if key in values:
            raise StructuralError(f"line {lineno}: duplicate record for year {key[0]}, age {key[1]}")
        values[key] = parsed[idx - 2]

    if not values:
        raise ParseError("no data records found", len(lines))
    table = HMDTable(column, values)
    _check_contiguous(table.years, "years")
    _check_contiguous(table.ages, "ages")
    return table


def read_hmd_file(path, column="Total") -> HMDTable:
    path = Path(path)
    try:
        return parse_hmd_table(path.read_text(encoding="utf-8", errors="replace"), column)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None
    except StructuralError as exc:
        raise StructuralError(f"{path}: {exc}") from None


def _fmt(v: float) -> str:
    return "." if math.isnan(v) else repr(float(v))


def format_hmd_table(grid, years, ages, title: str) -> str:
    """Render a grid as an HMD 1x1 file with the same value in all three sex columns.

    Age 110 is written as ``110+``.  Values use shortest round-trip formatting.
    """
    out = [f"{title}", "", "  Year      Age       Female       Male        Total"]
    for i, t in enumerate(years):
        for j, x in enumerate(ages):
            age = f"{x}+" if x == 110 else str(x)
            v = _fmt(grid[i][j])
            out.append(f"  {t:<8d}  {age:<6s}  {v}  {v}  {v}")
    return "\n".join(out) + "\n"
