"""Checkpoints, ensembles and CSV/JSON artifacts.

Everything is plain text so that re-running an experiment can be checked for
bit-identical output with a byte comparison.  Floats are written with
``repr``, which round-trips exactly.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn_core import Network
from .posterior import PosteriorEnsemble

CHECKPOINT_VERSION = 1


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    """Write ``rows`` under a fixed ``header`` with exact float formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    """Return ``(header, rows)`` with every cell as a string."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path} is empty", offset=0)
    return rows[0], rows[1:]


def to_jsonable(obj):
    """Plain Python structure with non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else _fmt(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, obj) -> None:
    """Sorted-key JSON; non-finite floats are written as strings."""
    with open(path, "w") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_network(net: Network, path) -> None:
    write_json(path, {"version": CHECKPOINT_VERSION, "sizes": list(net.sizes), "head": net.head,
                      "params": net.params})


def load_network(path) -> Network:
    d = read_json(path)
    if "sizes" not in d or "params" not in d:
        raise FormatError(f"{path} is not a network checkpoint", offset=0)
    return Network(d["sizes"], d.get("head", "classification"), np.array(d["params"], dtype=np.float64))


def save_ensemble(ens: PosteriorEnsemble, path) -> None:
    d = ens.to_dict()
    d["version"] = CHECKPOINT_VERSION
    write_json(path, d)


def load_ensemble(path) -> PosteriorEnsemble:
    d = read_json(path)
    if "kind" not in d:
        raise FormatError(f"{path} is not an ensemble file", offset=0)
    return PosteriorEnsemble.from_dict(d)


def files_identical(a, b) -> bool:
    """Byte-for-byte comparison of every file under two directories."""
    a, b = Path(a), Path(b)
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all((a / p).read_bytes() == (b / p).read_bytes() for p in fa)
