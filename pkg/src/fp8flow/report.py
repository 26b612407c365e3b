"""Report envelope plus JSON and CSV rendering.

Reports are flat JSON objects::

    {"schema": "fp8flow-report/1", "command": "...", "config": {...}, ...result fields}

Keys are sorted and floats are written with ``repr`` (shortest round-trip
form), so identical inputs give byte-identical files. Wall-clock figures live
under an optional ``timing`` key that only appears when explicitly requested.
"""

from __future__ import annotations

import csv
import io
import json
import math
from importlib import resources

import numpy as np

SCHEMA_ID = "fp8flow-report/1"
COMMANDS = ("quantize", "transpose", "dq-error", "casts", "moe-sim", "selftest")


def envelope(command: str, config: dict, result: dict) -> dict:
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    clash = {"schema", "command", "config"} & set(result)
    if clash:
        raise ValueError(f"result may not use reserved keys {sorted(clash)}")
    return {"schema": SCHEMA_ID, "command": command, "config": config, **result}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if not math.isfinite(f):
            raise ValueError("reports carry finite numbers only")
        return f
    return obj


def to_json(report: dict) -> str:
    return json.dumps(_plain(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(_plain(v), sort_keys=True)
    return str(v)


def to_csv(rows: list[dict]) -> str:
    """One header line plus one line per row; '.' decimal, no locale."""
    if not rows:
        return ""
    fields = list(rows[0])
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_cell(r.get(k, "")) for k in fields])
    return buf.getvalue()


def load_schema() -> dict:
    text = resources.files("fp8flow").joinpath("schema/report.schema.json").read_text()
    return json.loads(text)
