"""File formats: labeled matrix CSVs, relation manifests, raw input tables.

A matrix CSV has one header row (corner cell, then the column labels) and one
leading column of row labels.  Values are written with ``repr`` so that a
write/read round trip is exact.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .mode_priors import OfficialStats
from .relation_graph import GraphError, RelationGraph

log = logging.getLogger(__name__)

MALFORMED_LIMIT = 0.01

__all__ = [
    "MalformedInputError",
    "write_matrix",
    "read_matrix",
    "RelationEntry",
    "read_manifest",
    "write_manifest",
    "load_graph",
    "read_table",
    "read_events",
    "read_towers",
    "read_usage",
    "read_stats",
    "read_lines",
    "read_mapping",
    "PipelineManifest",
]


class MalformedInputError(ValueError):
    """Too many rows of an input file could not be parsed."""


def _fmt(value: float) -> str:
    value = float(value)
    return repr(value + 0.0)  # normalizes -0.0


def write_matrix(frame: pd.DataFrame, path: str | Path, corner: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    corner = corner if corner is not None else (frame.index.name or "")
    values = frame.to_numpy(dtype=float)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([corner, *map(str, frame.columns)])
        for label, row in zip(frame.index, values):
            writer.writerow([str(label), *map(_fmt, row)])


def read_matrix(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    header, body = rows[0], rows[1:]
    labels, values = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        labels.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    frame = pd.DataFrame(
        np.array(values, dtype=float).reshape(len(body), len(header) - 1),
        index=pd.Index(labels, name=header[0] or None),
        columns=header[1:],
    )
    return frame


@dataclass(frozen=True)
class RelationEntry:
    id: str
    source: str
    target: str
    path: Path
    provenance: str = "derived"


def read_manifest(path: str | Path) -> tuple[str, list[RelationEntry]]:
    """Read a relation manifest; paths are resolved against its directory."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    entries = [
        RelationEntry(
            id=item["id"],
            source=item["source"],
            target=item["target"],
            path=(path.parent / item["path"]).resolve(),
            provenance=item.get("provenance", "derived"),
        )
        for item in data["relations"]
    ]
    return data.get("target", "R01"), entries


def write_manifest(path: str | Path, entries: Iterable[RelationEntry], target: str = "R01") -> None:
    path = Path(path)
    base = path.parent.resolve()
    items = []
    for e in entries:
        rel = Path(os.path.relpath(Path(e.path).resolve(), base)).as_posix()
        items.append(
            {"id": e.id, "source": e.source, "target": e.target,
             "path": rel, "provenance": e.provenance}
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"target": target, "relations": items}, indent=1) + "\n",
                    encoding="utf-8")


def load_graph(manifest: str | Path | Sequence[RelationEntry], target: str | None = None) -> RelationGraph:
    """Build a frozen graph from a manifest file or a list of entries.

    The first matrix that mentions a concept fixes its label order; later
    matrices are reordered by label and must carry the same label set.
    """
    if isinstance(manifest, (str, Path)):
        manifest_target, entries = read_manifest(manifest)
        target = target or manifest_target
    else:
        entries = list(manifest)
    graph = RelationGraph(target or "R01")
    labels: dict[str, list[str]] = {}
    frames = []
    for e in entries:
        frame = read_matrix(e.path)
        frame.index = frame.index.astype(str)
        frame.columns = frame.columns.astype(str)
        for concept, axis in ((e.source, frame.index), (e.target, frame.columns)):
            if concept not in labels:
                labels[concept] = list(axis)
                graph.add_concept(concept, labels[concept])
            elif set(axis) != set(labels[concept]) or len(axis) != len(labels[concept]):
                raise GraphError(f"{e.id}: labels of {concept!r} differ from earlier relations")
        frames.append((e, frame.loc[labels[e.source], labels[e.target]]))
    for e, frame in frames:
        graph.add_relation(e.source, e.target, frame.to_numpy(), e.id, e.provenance)
    return graph.freeze()


def read_table(
    path: str | Path,
    columns: Mapping[str, Callable[[str], object]],
    limit: float = MALFORMED_LIMIT,
) -> pd.DataFrame:
    """Read a headed CSV, converting the named columns.

    Rows that fail to parse are logged with their line numbers and skipped;
    more than ``limit`` malformed rows abort with :class:`MalformedInputError`.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    names = list(columns)
    records: dict[str, list] = {name: [] for name in names}
    bad: list[tuple[int, str]] = []
    total = 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return pd.DataFrame({name: [] for name in names})
        header = [h.strip() for h in header]
        missing = [n for n in names if n not in header]
        if missing:
            raise MalformedInputError(f"{path}: missing columns {missing}")
        idx = [header.index(n) for n in names]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            total += 1
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                parsed = [columns[n](row[i].strip()) for n, i in zip(names, idx)]
            except (ValueError, TypeError) as exc:
                bad.append((lineno, str(exc)))
                continue
            for n, v in zip(names, parsed):
                records[n].append(v)
    for lineno, msg in bad[:20]:
        log.warning("%s:%d: malformed row skipped (%s)", path, lineno, msg)
    if total and len(bad) / total > limit:
        lines = ", ".join(str(n) for n, _ in bad[:10])
        raise MalformedInputError(
            f"{path}: {len(bad)} of {total} rows malformed (lines {lines}...)"
        )
    return pd.DataFrame(records)


def _nonempty(value: str) -> str:
    if not value:
        raise ValueError("empty field")
    return value


def _timestamp(value: str):
    number = float(value)
    if not np.isfinite(number):
        raise ValueError(f"non-finite timestamp {value!r}")
    return int(number) if number.is_integer() else number


def _finite(value: str) -> float:
    number = float(value)
    if not np.isfinite(number):
        raise ValueError(f"non-finite value {value!r}")
    return number


def _count(value: str) -> float:
    number = _finite(value)
    if number < 0:
        raise ValueError(f"negative count {value!r}")
    return number


def read_events(path) -> pd.DataFrame:
    """Events ``device,tower,timestamp`` sorted by device and time, duplicates removed."""
    table = read_table(path, {"device": _nonempty, "tower": _nonempty, "timestamp": _timestamp})
    table = table.sort_values(["device", "timestamp"], kind="mergesort")
    table = table.drop_duplicates(["device", "timestamp"], keep="first")
    return table.reset_index(drop=True)


def read_towers(path) -> pd.DataFrame:
    table = read_table(
        path, {"tower": _nonempty, "x_m": _finite, "y_m": _finite, "municipality": _nonempty}
    )
    if table["tower"].duplicated().any():
        raise MalformedInputError(f"{path}: duplicate tower ids")
    return table.set_index("tower")


def read_usage(path) -> pd.DataFrame:
    return read_table(path, {"tower": _nonempty, "domain": _nonempty, "count": _count})


def read_lines(path) -> list[str]:
    if path is None:
        return []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def read_mapping(path, key: str, value: str) -> dict[str, str]:
    table = read_table(path, {key: _nonempty, value: _nonempty})
    return dict(zip(table[key], table[value]))


def read_stats(stats_path, metro_path, active_factor=0.975, taxi_factor=1.09) -> OfficialStats:
    """Municipal stats CSV plus the one-row ``metro_base,metro_new`` CSV."""
    table = read_table(
        stats_path,
        {"municipality": _nonempty, "pop_base": _finite, "pop_new": _finite,
         "permits_base": _finite, "permits_new": _finite},
        limit=0.0,
    ).set_index("municipality")
    metro = read_table(metro_path, {"metro_base": _finite, "metro_new": _finite}, limit=0.0)
    if len(metro) != 1:
        raise MalformedInputError(f"{metro_path}: expected exactly one row")
    return OfficialStats(
        table,
        metro_base=float(metro["metro_base"].iloc[0]),
        metro_new=float(metro["metro_new"].iloc[0]),
        active_factor=active_factor,
        taxi_factor=taxi_factor,
    )


_MANIFEST_KEYS = (
    "relations", "events", "towers", "usage", "associations", "exclusions",
    "stats", "metro", "base_split", "run_config", "output", "reference",
    "macro_areas", "speed_scheme",
)


@dataclass
class PipelineManifest:
    """Paths used by the pipeline commands, resolved against the manifest file."""

    relations: Path | None = None
    events: Path | None = None
    towers: Path | None = None
    usage: Path | None = None
    associations: Path | None = None
    exclusions: Path | None = None
    stats: Path | None = None
    metro: Path | None = None
    base_split: Path | None = None
    run_config: Path | None = None
    output: Path | None = None
    reference: Path | None = None
    macro_areas: Path | None = None
    speed_scheme: Path | None = None

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        data = json.loads(path.read_text(encoding="utf-8"))
        unknown = sorted(set(data) - set(_MANIFEST_KEYS))
        if unknown:
            raise ValueError(f"{path}: unknown manifest keys {unknown}")
        return cls(**{k: (path.parent / v).resolve() for k, v in data.items() if v is not None})

    def require(self, *keys: str) -> None:
        for key in keys:
            value = getattr(self, key)
            if value is None:
                raise FileNotFoundError(f"manifest does not name a {key!r} path")
            if key != "output" and not value.exists():
                raise FileNotFoundError(f"{key} file not found: {value}")

    def run_settings(self) -> dict:
        if self.run_config is None:
            return {}
        if not self.run_config.is_file():
            raise FileNotFoundError(f"run config not found: {self.run_config}")
        data = json.loads(self.run_config.read_text(encoding="utf-8"))
        for key in ("speed_scheme", "macro_areas"):
            if data.get(key):
                data[key] = (self.run_config.parent / data[key]).resolve()
        return data
