"""Clustered-data model, validation and CSV interchange.

A dataset is an ordered collection of clusters; cluster ``i`` holds an
``m_i x p`` covariate matrix ``X``, a response vector ``Y`` of length
``m_i`` and optionally a vector of observation times. The CSV schema is
``cluster_id`` (string), optional ``time``, ``y``, ``x1 .. xp``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, SchemaError, ValidationError


@dataclass
class CsvSchema:
    """Column mapping for :func:`load_csv` / :func:`save_csv`."""

    cluster_col: str = "cluster_id"
    y_col: str = "y"
    time_col: str = "time"
    x_prefix: str = "x"


@dataclass
class Cluster:
    """One cluster: covariates ``X`` (m x p), responses ``y`` (m), optional times."""

    id: str
    X: np.ndarray
    y: np.ndarray
    times: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=float).ravel()

    @property
    def m(self) -> int:
        return self.X.shape[0]


@dataclass
class ClusteredDataset:
    """Ordered, immutable-by-convention collection of clusters."""

    clusters: list[Cluster]
    _flat: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return self.clusters[0].X.shape[1] if self.clusters else 0

    @property
    def N(self) -> int:
        return sum(c.m for c in self.clusters)

    @property
    def has_times(self) -> bool:
        return bool(self.clusters) and self.clusters[0].times is not None

    def cluster_times(self, i: int) -> np.ndarray:
        """Times of cluster ``i``, defaulting to positions 1..m_i when absent."""
        c = self.clusters[i]
        if c.times is not None:
            return c.times
        return np.arange(1.0, c.m + 1.0)

    def flat(self) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
        """Stacked ``(X, y, slices)`` with one (start, stop) row range per cluster."""
        if self._flat is None:
            X = np.concatenate([c.X for c in self.clusters], axis=0)
            y = np.concatenate([c.y for c in self.clusters])
            slices, start = [], 0
            for c in self.clusters:
                slices.append((start, start + c.m))
                start += c.m
            X.setflags(write=False)
            y.setflags(write=False)
            self._flat = (X, y, slices)
        return self._flat


def validate(ds: ClusteredDataset) -> list[str]:
    """Return a list of invariant violations (empty iff the dataset is valid)."""
    out = []
    if ds.n < 2:
        out.append(f"dataset: needs at least 2 clusters, found {ds.n}")
    if not ds.clusters:
        return out
    p = ds.clusters[0].X.shape[1]
    timed = ds.clusters[0].times is not None
    for c in ds.clusters:
        if c.m < 1:
            out.append(f"cluster {c.id}: empty cluster")
            continue
        if c.X.shape[1] != p:
            out.append(f"cluster {c.id}: X has {c.X.shape[1]} covariates, expected {p}")
        if len(c.y) != c.m:
            out.append(f"cluster {c.id}: Y length {len(c.y)} != {c.m} rows of X")
        if c.times is not None and len(c.times) != c.m:
            out.append(f"cluster {c.id}: times length {len(c.times)} != {c.m} rows of X")
        if (c.times is not None) != timed:
            out.append(f"cluster {c.id}: times present in some clusters but not all")
        if not np.all(np.isfinite(c.X)):
            out.append(f"cluster {c.id}: X contains non-finite entries")
        if not np.all(np.isfinite(c.y)):
            out.append(f"cluster {c.id}: Y contains non-finite entries")
        if c.times is not None and not np.all(np.isfinite(c.times)):
            out.append(f"cluster {c.id}: times contain non-finite entries")
    return out


def _x_columns(header: list[str], schema: CsvSchema) -> list[str]:
    cols = []
    for name in header:
        if name.startswith(schema.x_prefix):
            suffix = name[len(schema.x_prefix):]
            if suffix.isdigit():
                cols.append((int(suffix), name))
    cols.sort()
    return [name for _, name in cols]


def load_csv(path, schema: CsvSchema | None = None) -> ClusteredDataset:
    """Read a clustered dataset from CSV.

    Clusters are ordered by first appearance; within a cluster rows are
    ordered by time when a time column is present, else by file order.
    Rows with empty or non-numeric cells are rejected.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for required in (schema.cluster_col, schema.y_col):
            if required not in header:
                raise SchemaError(f"{path}: missing required column '{required}'")
        x_cols = _x_columns(header, schema)
        if not x_cols:
            raise SchemaError(f"{path}: no covariate columns '{schema.x_prefix}1..'")
        has_time = schema.time_col in header
        idx = {name: header.index(name) for name in header}

        groups: dict[str, list] = {}
        order: list[str] = []
        for rownum, row in enumerate(reader, start=2):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {rownum}: expected {len(header)} cells, found {len(row)}")

            def cell(name):
                raw = row[idx[name]].strip()
                if raw == "":
                    raise ParseError(f"{path}: row {rownum}: empty cell in column '{name}'")
                try:
                    return float(raw)
                except ValueError:
                    raise ParseError(f"{path}: row {rownum}: non-numeric cell '{raw}' in column '{name}'") from None

            cid = row[idx[schema.cluster_col]].strip()
            if cid == "":
                raise ParseError(f"{path}: row {rownum}: empty cluster id")
            xs = [cell(name) for name in x_cols]
            t = cell(schema.time_col) if has_time else None
            rec = (t, cell(schema.y_col), xs)
            if cid not in groups:
                groups[cid] = []
                order.append(cid)
            groups[cid].append(rec)

    clusters = []
    for cid in order:
        recs = groups[cid]
        if has_time:
            recs = sorted(recs, key=lambda r: r[0])
        X = np.array([r[2] for r in recs], dtype=float)
        y = np.array([r[1] for r in recs], dtype=float)
        times = np.array([r[0] for r in recs], dtype=float) if has_time else None
        clusters.append(Cluster(id=cid, X=X, y=y, times=times))

    ds = ClusteredDataset(clusters)
    problems = validate(ds)
    if problems:
        raise ValidationError(f"{path}: " + "; ".join(problems))
    return ds


def save_csv(ds: ClusteredDataset, path, schema: CsvSchema | None = None) -> None:
    """Write the dataset in the same CSV schema `load_csv` reads."""
    schema = schema or CsvSchema()
    p = ds.p
    header = [schema.cluster_col]
    if ds.has_times:
        header.append(schema.time_col)
    header.append(schema.y_col)
    header.extend(f"{schema.x_prefix}{q + 1}" for q in range(p))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for c in ds.clusters:
            for j in range(c.m):
                row = [c.id]
                if ds.has_times:
                    row.append(repr(float(c.times[j])))
                row.append(repr(float(c.y[j])))
                row.extend(repr(float(v)) for v in c.X[j])
                writer.writerow(row)
