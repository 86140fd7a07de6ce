"""On-disk artifacts: posterior samples, group likelihood tables, WVO files, reports.

Every file carries a ``# key=value`` comment header (seed, config hash) so
runs are traceable.  Floats are written with 17 significant digits and no
timestamps are recorded, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wvo.errors import DataError, UsageError
from wvo.optimize import WeightAssignment
from wvo.sampler import GroupLikTable, PosteriorSamples
from wvo.virtual import VirtualObservationSet

SCHEMA_VERSION = 1
BUDGET_RTOL = 1e-9


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _write_header(fh, meta: dict):
    for key in sorted(meta):
        fh.write(f"# {key}={meta[key]}\n")


def _read_commented(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    meta, body = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            else:
                body.append(line)
    return meta, list(csv.reader(body))


def write_rows(path, columns, rows, meta: dict | None = None) -> None:
    """CSV with a fixed column order; missing entries are left empty."""
    with open(path, "w", newline="") as fh:
        _write_header(fh, meta or {})
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def read_rows(path) -> tuple[list[dict], dict]:
    meta, rows = _read_commented(path)
    if not rows:
        raise DataError(f"{path}: no header row")
    return [dict(zip(rows[0], r)) for r in rows[1:]], meta


def write_samples(path, samples: PosteriorSamples, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("chains", int(samples.chain.max()) + 1)
    rows = [dict(zip(samples.names, r)) for r in samples.values]
    write_rows(path, list(samples.names), rows, meta)


def read_samples(path) -> tuple[PosteriorSamples, dict]:
    meta, rows = _read_commented(path)
    if len(rows) < 2:
        raise DataError(f"{path}: no samples")
    try:
        values = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"{path}: malformed sample value ({exc})") from exc
    chains = int(meta.get("chains", 1))
    chain = np.repeat(np.arange(chains), len(values) // chains) if len(values) % chains == 0 else None
    return PosteriorSamples(values, rows[0], chain=chain), meta


def write_table(path, table: GroupLikTable, meta: dict | None = None) -> None:
    meta = dict(meta or {}, n_draws=table.n_draws)
    labels = list(table.labels) or [f"g{k + 1}" for k in range(table.n_groups)]
    write_rows(path, labels, [dict(zip(labels, r)) for r in table.values], meta)


def read_table(path) -> tuple[GroupLikTable, dict]:
    meta, rows = _read_commented(path)
    if len(rows) < 2 or "n_draws" not in meta:
        raise DataError(f"{path}: not a group likelihood table")
    values = np.array([[float(v) for v in r] for r in rows[1:]])
    return GroupLikTable(values, int(meta["n_draws"]), tuple(rows[0])), meta


@dataclass
class WvoFile:
    """The interchange artifact: virtual values, their weights and provenance."""

    model: str
    vobs: VirtualObservationSet
    weights: WeightAssignment
    budget: float
    provenance: dict

    def __post_init__(self):
        if self.vobs.level != self.weights.level:
            raise UsageError("virtual set and weights belong to different levels")
        total = self.weights.w.sum() if self.weights.v is None else self.weights.v.sum()
        if not np.isclose(total, self.budget, rtol=BUDGET_RTOL, atol=0):
            raise DataError(f"weights sum to {total}, budget is {self.budget}")
        if self.weights.v is not None and not np.allclose(self.weights.w.sum(axis=1), 1.0,
                                                          rtol=BUDGET_RTOL, atol=0):
            raise DataError("within-group weights must sum to 1")

    def to_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "model": self.model,
            "level": self.vobs.level,
            "budget": self.budget,
            "virtual": self.vobs.values.tolist(),
            "aux": {k: np.asarray(v).tolist() for k, v in self.vobs.aux.items()},
            "weights": {"w": self.weights.w.tolist()},
            "provenance": dict(self.provenance, seed=self.vobs.seed, source=self.vobs.source.tolist()),
        }
        if self.weights.v is not None:
            out["weights"]["v"] = self.weights.v.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "WvoFile":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported WVO schema version {d.get('schema_version')!r}")
        try:
            prov = dict(d["provenance"])
            vobs = VirtualObservationSet(d["level"], d["virtual"], prov.pop("source"), prov.pop("seed"),
                                         {k: np.asarray(v, dtype=float) for k, v in d.get("aux", {}).items()})
            weights = WeightAssignment(d["weights"]["w"], d["weights"].get("v"))
            return cls(d["model"], vobs, weights, float(d["budget"]), prov)
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed WVO file ({exc})") from exc


def write_wvo(path, wvo: WvoFile) -> None:
    with open(path, "w") as fh:
        json.dump(wvo.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_wvo(path) -> WvoFile:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    try:
        with open(path) as fh:
            return WvoFile.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
