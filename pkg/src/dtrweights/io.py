"""CSV ingestion and emission, flat key-value configuration files."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DataError, Panel

SCHEMA_VERSION = "1.0"
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})
_COL = re.compile(r"^x(\d+)_(\d+)$|^a(\d+)$")


def format_value(v) -> str:
    """Shortest string that parses back to the identical value."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        return repr(f)
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return " ".join(format_value(x) for x in v)
    return str(v)


def write_csv(path, rows: list[dict], columns=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_value(r.get(c)) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return None if math.isnan(f) or math.isinf(f) else f
    return v


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, NaN written as null, schema version stamped."""
    obj = _jsonable(obj)
    if isinstance(obj, dict) and "schema_version" not in obj:
        obj = {"schema_version": SCHEMA_VERSION, **obj}
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


@dataclass(frozen=True)
class IngestSchema:
    """Column mapping for a wide CSV with one row per individual.

    ``covariates[t]`` lists the stage-``t`` covariate columns, ``treatments[t]``
    the stage-``t`` treatment column. ``treatment_map`` translates raw codes
    to the alphabet; by default the codes ``0``/``1`` are accepted as is.
    """

    covariates: tuple
    treatments: tuple
    outcome: str
    id: str | None = None
    missing: str = "fail"
    treatment_map: dict | None = None

    def __post_init__(self):
        if self.missing not in ("fail", "drop-row"):
            raise ValueError("missing policy must be 'fail' or 'drop-row'")
        if len(self.covariates) != len(self.treatments):
            raise ValueError("need one covariate list per treatment column")

    @classmethod
    def infer(cls, header, outcome: str = "y", id: str | None = "id", missing: str = "fail") -> "IngestSchema":
        """Schema from ``x{t}_{j}`` / ``a{t}`` column names (1-based)."""
        xs: dict = {}
        stages = set()
        for col in header:
            m = _COL.match(col)
            if not m:
                continue
            if m.group(3):
                stages.add(int(m.group(3)))
            else:
                xs.setdefault(int(m.group(1)), []).append((int(m.group(2)), col))
        T = max(stages, default=0)
        if T == 0 or stages != set(range(1, T + 1)):
            raise DataError("cannot infer treatment columns a1..aT from the header")
        covs = tuple(tuple(c for _, c in sorted(xs.get(t, []))) for t in range(1, T + 1))
        if any(not c for c in covs):
            raise DataError("every stage needs at least one x{t}_{j} column")
        return cls(covs, tuple(f"a{t}" for t in range(1, T + 1)), outcome, id if id in header else None, missing)


@dataclass
class IngestReport:
    rows_in: int = 0
    rows_out: int = 0
    dropped: list = field(default_factory=list)  # (row number, column, reason)

    def as_dict(self) -> dict:
        return {
            "rows_in": self.rows_in,
            "rows_out": self.rows_out,
            "dropped": [{"row": r, "column": c, "reason": why} for r, c, why in self.dropped],
        }


def _integer_code(raw: str) -> str | None:
    # "1.0" -> "1"
    try:
        v = float(raw)
    except ValueError:
        return None
    return str(int(v)) if math.isfinite(v) and v == int(v) else None


def ingest_csv(path, schema: IngestSchema | None = None, missing: str = "fail") -> tuple[Panel, IngestReport]:
    """Read a panel from CSV. Row numbers in messages count the header as row 1.

    Without a schema, columns are inferred from ``x{t}_{j}``/``a{t}``/``y``
    names and ``missing`` sets the missing-data policy.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        schema = schema or IngestSchema.infer(header, missing=missing)
        pos = {h: i for i, h in enumerate(header)}
        needed = [c for cols in schema.covariates for c in cols] + list(schema.treatments) + [schema.outcome]
        for c in needed:
            if c not in pos:
                raise DataError(f"{path}: mapped column {c!r} not in header")
        tmap = {str(k): int(v) for k, v in (schema.treatment_map or {"0": 0, "1": 1}).items()}
        report = IngestReport()
        X = [[] for _ in schema.covariates]
        A, Y = [], []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            report.rows_in += 1
            if len(row) != len(header):
                raise DataError(f"{path}: row {rowno} has {len(row)} fields, header has {len(header)}")
            parsed = {}
            skip = None
            for c in needed:
                raw = row[pos[c]].strip()
                if raw.lower() in MISSING_TOKENS:
                    if schema.missing == "drop-row":
                        skip = (rowno, c, "missing")
                        break
                    raise DataError(f"{path}: row {rowno}, column {c!r}: missing value")
                if c in schema.treatments:
                    key = raw if raw in tmap else _integer_code(raw)
                    if key not in tmap:
                        raise DataError(f"{path}: row {rowno}, column {c!r}: unknown treatment code {raw!r}")
                    parsed[c] = tmap[key]
                else:
                    try:
                        v = float(raw)
                    except ValueError:
                        raise DataError(f"{path}: row {rowno}, column {c!r}: cannot parse {raw!r} as a number") from None
                    if not math.isfinite(v):
                        raise DataError(f"{path}: row {rowno}, column {c!r}: non-finite value {raw!r}")
                    parsed[c] = v
            if skip is not None:
                report.dropped.append(skip)
                continue
            for t, cols in enumerate(schema.covariates):
                X[t].append([parsed[c] for c in cols])
            A.append([parsed[c] for c in schema.treatments])
            Y.append(parsed[schema.outcome])
    if not Y:
        raise DataError(f"{path}: no usable rows")
    report.rows_out = len(Y)
    panel = Panel(
        X=tuple(np.array(x, dtype=float).reshape(len(Y), -1) for x in X),
        A=np.array(A, dtype=np.int64),
        Y=np.array(Y, dtype=float),
        covariate_names=tuple(tuple(c) for c in schema.covariates),
    )
    return panel, report


def panel_rows(panel: Panel) -> tuple[list, list[dict]]:
    """Wide-format columns and records for a panel (``x{t}_{j}``, ``a{t}``, ``y``)."""
    cols = ["id"]
    for t in range(panel.T):
        cols += [f"x{t + 1}_{j + 1}" for j in range(panel.X[t].shape[1])]
        cols.append(f"a{t + 1}")
    cols.append("y")
    rows = []
    for i in range(panel.n):
        r = {"id": i + 1}
        for t in range(panel.T):
            for j in range(panel.X[t].shape[1]):
                r[f"x{t + 1}_{j + 1}"] = float(panel.X[t][i, j])
            r[f"a{t + 1}"] = int(panel.A[i, t])
        r["y"] = float(panel.Y[i])
        rows.append(r)
    return cols, rows


def write_panel(path, panel: Panel) -> Path:
    cols, rows = panel_rows(panel)
    return write_csv(path, rows, cols)


def parse_config(text: str) -> dict:
    """Flat ``section.key = value`` document; ``#`` starts a comment.

    Returns ``{"section.key": "value"}`` with surrounding whitespace removed.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not re.fullmatch(r"[A-Za-z0-9_-]+\.[A-Za-z0-9_-]+", key):
            raise ValueError(f"config line {lineno}: key {key!r} must look like section.key")
        if key in out:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"))
