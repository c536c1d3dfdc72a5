"""Long-format CSV ingestion and JSON report helpers.

The file schema is a header ``unit,period,y,x1,...,xK`` followed by one row
per cell. The intercept is never stored; it is prepended on read when
requested. Units and periods keep their order of first appearance.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import PanelParseError
from .panel import PanelDataset

SCHEMA_VERSION = "1.0"


def read_panel_csv(path, intercept: bool = True) -> PanelDataset:
    """Load a balanced long-format panel.

    Raises
    ------
    PanelParseError
        On a malformed header, non-numeric or missing cells (with the line
        number), duplicated ``(unit, period)`` pairs, or an unbalanced panel
        (naming the units whose period set differs from the first unit's).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelParseError(f"{path}: file is empty") from None
        if len(header) < 4 or [h.lower() for h in header[:3]] != ["unit", "period", "y"]:
            raise PanelParseError(
                f"{path}: line 1: header must start with unit,period,y and name at least one regressor"
            )
        regressors = header[3:]
        cells: dict = {}
        units, periods = [], []
        seen_units, seen_periods = set(), set()
        width = len(header)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise PanelParseError(f"{path}: line {line}: expected {width} fields, got {len(row)}")
            unit, period = row[0].strip(), row[1].strip()
            if not unit or not period:
                raise PanelParseError(f"{path}: line {line}: empty unit or period identifier")
            try:
                values = [float(c) for c in row[2:]]
            except ValueError:
                raise PanelParseError(f"{path}: line {line}: non-numeric value") from None
            if not all(math.isfinite(v) for v in values):
                raise PanelParseError(f"{path}: line {line}: missing or non-finite value")
            if (unit, period) in cells:
                raise PanelParseError(f"{path}: line {line}: duplicate cell ({unit}, {period})")
            cells[(unit, period)] = values
            if unit not in seen_units:
                seen_units.add(unit)
                units.append(unit)
            if period not in seen_periods:
                seen_periods.add(period)
                periods.append(period)
    if not cells:
        raise PanelParseError(f"{path}: no data rows")

    by_unit = {u: set() for u in units}
    for unit, period in cells:
        by_unit[unit].add(period)
    full = set(periods)
    offending = [u for u in units if by_unit[u] != full]
    if offending:
        shown = ", ".join(offending[:10]) + (" ..." if len(offending) > 10 else "")
        raise PanelParseError(
            f"{path}: unbalanced panel; units missing periods: {shown}"
        )

    n, t = len(units), len(periods)
    table = np.array([[cells[(u, p)] for p in periods] for u in units])
    y = table[:, :, 0]
    x = table[:, :, 1:]
    names = tuple(regressors)
    if intercept:
        x = np.concatenate([np.ones((n, t, 1)), x], axis=2)
        names = ("const",) + names
    return PanelDataset(y, x, tuple(units), tuple(periods), names, has_intercept=intercept)


def write_panel_csv(data: PanelDataset, path) -> None:
    """Write ``data`` in the long format read by :func:`read_panel_csv`.

    Floats are written with ``repr`` so a round trip is exact. The intercept
    column is dropped when the dataset declares one.
    """
    start = 1 if data.has_intercept else 0
    names = list(data.regressor_names[start:])
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["unit", "period", "y"] + names)
        for i, unit in enumerate(data.unit_labels):
            for t, period in enumerate(data.period_labels):
                writer.writerow([unit, period, repr(float(data.y[i, t]))]
                                + [repr(float(v)) for v in data.x[i, t, start:]])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_report(report: dict, path=None) -> str:
    """Serialise a report deterministically (sorted keys, schema version stamped)."""
    body = {"schema_version": SCHEMA_VERSION}
    body.update(_jsonable(report))
    text = json.dumps(body, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_report(path) -> dict:
    """Read a JSON report written by :func:`dump_report`."""
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PanelParseError(f"{path}: invalid JSON report: {exc}") from None


def format_table(header, rows, floatfmt: str = "{:.4f}") -> str:
    """Render rows as an aligned plain-text table."""
    cells = [[str(h) for h in header]]
    for row in rows:
        cells.append([floatfmt.format(v) if isinstance(v, (float, np.floating)) else str(v)
                      for v in row])
    widths = [max(len(r[j]) for r in cells) for j in range(len(header))]
    lines = []
    for idx, row in enumerate(cells):
        lines.append("  ".join(c.rjust(w) if j else c.ljust(w)
                               for j, (c, w) in enumerate(zip(row, widths))))
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
