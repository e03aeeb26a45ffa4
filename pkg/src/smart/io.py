"""Matrix CSV, result CSV and JSON serialization.

Every writer here is a deterministic function of its input, so repeated
runs produce byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

RESULT_HEADER = ("method", "sweep_name", "sweep_value", "replicate", "seed", "error", "seconds",
                 "hyperparams")


class DataError(ValueError):
    """Input files are malformed or have incompatible shapes."""


def format_matrix(A) -> str:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    lines = [",".join("%.17g" % x for x in row) for row in A]
    return "\n".join(lines) + "\n"


def write_matrix(path, A) -> None:
    """Headerless CSV, one row per line, 17 significant digits (lossless)."""
    Path(path).write_text(format_matrix(A), encoding="utf-8")


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        A = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: not a numeric CSV matrix ({exc})") from exc
    if A.size == 0:
        raise DataError(f"{path}: empty matrix")
    if not np.all(np.isfinite(A)):
        raise DataError(f"{path}: non-finite entries")
    return A


def _plain(x):
    """Convert numpy scalars/arrays and non-finite floats to JSON-safe values."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def _scalar(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def format_results(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    for r in rows:
        hp = json.dumps(_plain(r.hyperparams), sort_keys=True, separators=(",", ":"))
        w.writerow([r.method, r.sweep_name, _scalar(r.sweep_value), r.replicate, r.seed,
                    _scalar(r.error), _scalar(r.seconds), hp])
    return buf.getvalue()


def write_results(path, rows) -> None:
    Path(path).write_text(format_results(rows), encoding="utf-8")


def read_results(path) -> list:
    """Result CSV rows as dicts with numeric fields parsed."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rec["sweep_value"] = float(rec["sweep_value"])
            rec["replicate"] = int(rec["replicate"])
            rec["seed"] = int(rec["seed"])
            rec["error"] = float(rec["error"])
            rec["seconds"] = float(rec["seconds"]) if rec["seconds"] else None
            rec["hyperparams"] = json.loads(rec["hyperparams"])
            out.append(rec)
    return out
