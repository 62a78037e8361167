"""Files on disk: CSV record sets with a JSON manifest, models and reports.

CSV files use a header row, comma separators, '.' decimals, LF line endings
and 17 significant digits. Every file is written to a temporary sibling and
renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .model import HybridModel, fmt_float
from .reference_systems import LcoRecord, TrainingDataset

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt_float(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))


def read_csv(path):
    """Header and numeric data of a CSV written by :func:`write_csv`."""
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def column_names(dataset, m=None):
    m = dataset.m if m is None else m
    named = [k for k in dataset.units if k != "mu"]
    return named if len(named) == m else [f"z{i + 1}" for i in range(m)]


def write_dataset(dataset: TrainingDataset, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = column_names(dataset)
    entries = []
    for k, rec in enumerate(dataset.records):
        name = f"record_{k:02d}_{rec.stability}.csv"
        rows = np.column_stack([rec.t, rec.states])
        write_csv(out_dir / name, ["t"] + [f"z{i + 1}" for i in range(rec.m)], rows)
        entries.append({"file": name, "record_id": rec.record_id, "mu": rec.mu, "stability": rec.stability,
                        "dt": rec.dt, "provenance": rec.provenance})
    manifest = {"format_version": MANIFEST_VERSION, "columns": cols, "units": dataset.units,
                "records": entries}
    atomic_write_text(out_dir / MANIFEST, json.dumps(manifest, indent=1) + "\n")


def read_dataset(data_dir) -> TrainingDataset:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / MANIFEST).read_text())
    recs = []
    for e in manifest["records"]:
        _, data = read_csv(data_dir / e["file"])
        if not np.all(np.isfinite(data)):
            raise ValueError(f"non-finite values in {e['file']}")
        recs.append(LcoRecord(float(e["mu"]), e["stability"], data[:, 0], data[:, 1:],
                              e.get("provenance", "simulated"), e.get("record_id", "")))
    return TrainingDataset(recs, dict(manifest.get("units", {})))


def dataset_columns(data_dir):
    manifest = json.loads((Path(data_dir) / MANIFEST).read_text())
    return tuple(manifest.get("columns", ()))


def write_model(model: HybridModel, path):
    atomic_write_text(path, model.dumps())


def read_model(path) -> HybridModel:
    return HybridModel.loads(Path(path).read_text())


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
