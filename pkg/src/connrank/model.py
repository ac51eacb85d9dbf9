"""Core value types shared across the package.

All types are treated as immutable once constructed; arrays are copied and
marked read-only where practical so they can be shared between workers.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np


class ConnrankError(Exception):
    """Base class for all errors raised by this package."""


class StructureError(ConnrankError):
    """Malformed pairing or dataset structure."""


class ShapeError(ConnrankError):
    """Array dimensions do not agree."""


class DegenerateError(ConnrankError):
    """A signal or cell carries no variance."""


class StateError(ConnrankError):
    """Operation applied to a value in the wrong state (e.g. thresholded twice)."""


class FormatError(ConnrankError):
    """Input file is malformed or unsupported."""


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScanRecord:
    scan_id: str
    subject_id: Optional[str]
    session_index: Optional[int]
    tr_seconds: float
    path: str = ""
    format: str = "csv"
    n_timepoints: Optional[int] = None

    def to_manifest_entry(self) -> dict:
        entry = {
            "scan_id": self.scan_id,
            "tr_seconds": self.tr_seconds,
            "path": self.path,
            "format": self.format,
        }
        if self.subject_id is not None:
            entry["subject_id"] = self.subject_id
        if self.session_index is not None:
            entry["session"] = self.session_index
        return entry


@dataclass(frozen=True)
class TimeSeriesMatrix:
    """Signals (voxels or ROIs) by timepoints, with the sampling interval."""

    values: np.ndarray
    tr_seconds: float
    row_ids: tuple = ()

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.ndim != 2:
            raise ShapeError(f"time-series must be 2-D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            bad = np.argwhere(~np.isfinite(vals))[0]
            raise ValueError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        if not self.tr_seconds > 0:
            raise ValueError(f"tr_seconds must be positive, got {self.tr_seconds}")
        object.__setattr__(self, "values", vals)
        ids = tuple(self.row_ids) if len(self.row_ids) else tuple(range(vals.shape[0]))
        if len(ids) != vals.shape[0]:
            raise ShapeError(f"{len(ids)} row ids for {vals.shape[0]} rows")
        object.__setattr__(self, "row_ids", ids)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.values.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.n_timepoints * self.tr_seconds


@dataclass(frozen=True)
class Parcellation:
    """Voxel -> cell label map. ``labels[v]`` is the cell of linear voxel ``v``; 0 is background.

    ``grid_shape`` is the 3-D grid the linear index refers to (NIfTI order, x fastest),
    or None when voxels are only known by index. ``remap`` records dense relabeling
    of gapped input labels as ``{original: new}``.
    """

    labels: np.ndarray
    n_cells: int
    scheme_tag: str = "external"
    grid_shape: Optional[tuple] = None
    remap: dict = field(default_factory=dict)

    def __post_init__(self):
        labels = _frozen(np.ravel(self.labels), dtype=np.int64)
        if labels.size and labels.min() < 0:
            raise FormatError("negative labels are not allowed")
        present = np.unique(labels[labels > 0])
        if len(present) != self.n_cells or (self.n_cells and present[-1] != self.n_cells):
            missing = sorted(set(range(1, self.n_cells + 1)) - set(present.tolist()))
            raise StructureError(
                f"cells must be labeled densely 1..{self.n_cells}; missing or extra labels {missing}"
            )
        if self.grid_shape is not None and int(np.prod(self.grid_shape)) != labels.size:
            raise ShapeError(f"grid {self.grid_shape} does not hold {labels.size} voxels")
        object.__setattr__(self, "labels", labels)

    @property
    def voxel_indices(self) -> np.ndarray:
        """Linear indices of labeled voxels, ascending (the ingest row order)."""
        return np.flatnonzero(self.labels)

    @property
    def row_labels(self) -> np.ndarray:
        """Cell label of each ingest row."""
        return self.labels[self.labels > 0]

    @property
    def n_labeled(self) -> int:
        return int(np.count_nonzero(self.labels))

    def cell_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_cells + 1)[1:]


@dataclass(frozen=True)
class Connectome:
    """Symmetric C x C weighted adjacency; the diagonal is stored as 0.

    ``threshold`` is None for an unthresholded matrix, else the cutoff tau that
    was applied (entries <= tau were zeroed).
    """

    weights: np.ndarray
    threshold: Optional[float] = None
    scan_id: str = ""

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, copy=True)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ShapeError(f"adjacency must be square, got {w.shape}")
        if not np.allclose(w, w.T, rtol=0, atol=1e-12):
            raise ValueError("adjacency matrix is not symmetric")
        np.fill_diagonal(w, 0.0)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_rois(self) -> int:
        return self.weights.shape[0]

    @property
    def thresholded(self) -> bool:
        return self.threshold is not None

    def upper(self) -> np.ndarray:
        """Strict upper-triangle weights in row-major order."""
        return self.weights[np.triu_indices(self.n_rois, k=1)]


@dataclass(frozen=True)
class Pairing:
    """A full pairing of scans: a fixed-point-free involution ``partner``."""

    partner: np.ndarray

    def __post_init__(self):
        p = _frozen(self.partner, dtype=np.int64)
        n = p.size
        if p.ndim != 1 or n % 2:
            raise StructureError(f"a pairing needs an even number of scans, got {n}")
        idx = np.arange(n)
        if n and (p.min() < 0 or p.max() >= n):
            raise StructureError("partner index out of range")
        if np.any(p == idx):
            raise StructureError(f"scan {int(np.flatnonzero(p == idx)[0])} is paired with itself")
        if np.any(p[p] != idx):
            raise StructureError("partner relation is not symmetric")
        object.__setattr__(self, "partner", p)

    @classmethod
    def from_pairs(cls, pairs, n=None) -> "Pairing":
        pairs = [tuple(int(x) for x in pr) for pr in pairs]
        n = 2 * len(pairs) if n is None else n
        partner = np.full(n, -1, dtype=np.int64)
        for a, b in pairs:
            if partner[a] != -1 or partner[b] != -1:
                raise StructureError(f"scan listed in more than one pair: ({a}, {b})")
            partner[a], partner[b] = b, a
        if np.any(partner < 0):
            raise StructureError("pairs do not cover every scan")
        return cls(partner)

    @property
    def n(self) -> int:
        return self.partner.size

    def pairs(self) -> list:
        return [(k, int(m)) for k, m in enumerate(self.partner) if k < m]

    def __eq__(self, other):
        return isinstance(other, Pairing) and np.array_equal(self.partner, other.partner)

    def __hash__(self):
        return hash(self.partner.tobytes())


@dataclass(frozen=True)
class PipelineConfig:
    """Graph-inference settings for one procedure.

    ``parcellation_source`` is a label-map path, ``"uniform"`` (rebuilt with
    ``n_rois_target`` cells) or ``"identity"`` (input rows are already ROIs).
    ``threshold`` is None or a percentile in [0, 100).
    """

    n_rois_target: Optional[int] = None
    extraction: str = "mean"
    threshold: Optional[float] = None
    window_seconds: Optional[float] = None
    distance_metric: str = "squared_frobenius"
    parcellation_source: str = "identity"
    mask_path: Optional[str] = None
    absolute_threshold: bool = False

    def __post_init__(self):
        if self.extraction not in ("mean", "eigenvariate"):
            raise ValueError(f"extraction must be 'mean' or 'eigenvariate', got {self.extraction!r}")
        if self.distance_metric not in ("squared_frobenius", "l1"):
            raise ValueError(f"unknown distance metric {self.distance_metric!r}")
        if self.threshold is not None and not 0 <= self.threshold < 100:
            raise ValueError(f"threshold percentile must be in [0, 100), got {self.threshold}")
        if self.window_seconds is not None and not self.window_seconds > 0:
            raise ValueError("window_seconds must be positive")
        if not self.parcellation_source:
            raise ValueError("a parcellation source is required")
        if self.parcellation_source == "uniform" and not self.n_rois_target:
            raise ValueError("uniform parcellation needs n_rois_target")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if d.get("threshold") in ("none", "None"):
            d["threshold"] = None
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "PipelineConfig":
        return PipelineConfig(**{**self.to_dict(), **kw})

    def config_hash(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check_scans(self, scans: Sequence[ScanRecord]) -> None:
        if self.window_seconds is None:
            return
        durations = [s.tr_seconds * s.n_timepoints for s in scans if s.n_timepoints]
        if durations and self.window_seconds > min(durations) + 1e-9:
            raise ValueError(
                f"window {self.window_seconds}s exceeds the shortest scan ({min(durations)}s)"
            )


def validate_dataset(scans: Sequence[ScanRecord], check_files: bool = True) -> list[str]:
    """Return a list of human-readable violations; empty means the dataset is valid."""
    problems = []
    seen = {}
    ids = {}
    for k, s in enumerate(sorted(scans, key=lambda s: (s.scan_id, str(s.subject_id), str(s.session_index)))):
        if s.scan_id in ids:
            problems.append(f"duplicate scan_id {s.scan_id!r}")
        ids[s.scan_id] = k
        if s.subject_id is not None or s.session_index is not None:
            key = (s.subject_id, s.session_index)
            if key in seen:
                problems.append(
                    f"duplicate (subject, session) pair ({s.subject_id}, {s.session_index}) "
                    f"in scans {seen[key]!r} and {s.scan_id!r}"
                )
            else:
                seen[key] = s.scan_id
            if s.session_index is not None and s.session_index < 1:
                problems.append(f"scan {s.scan_id!r}: session must be >= 1, got {s.session_index}")
        if not (isinstance(s.tr_seconds, (int, float)) and math.isfinite(s.tr_seconds) and s.tr_seconds > 0):
            problems.append(f"scan {s.scan_id!r}: non-positive TR {s.tr_seconds}")
        if s.n_timepoints is not None and s.n_timepoints < 2:
            problems.append(f"scan {s.scan_id!r}: needs at least 2 timepoints, has {s.n_timepoints}")
        if check_files and s.path and not os.path.exists(s.path):
            problems.append(f"scan {s.scan_id!r}: missing file {s.path}")
    return problems


def is_labeled(scans: Sequence[ScanRecord]) -> bool:
    return all(s.subject_id is not None and s.session_index is not None for s in scans)


def true_pairing(scans: Sequence[ScanRecord]) -> Pairing:
    """Pair each scan with the other session of the same subject."""
    by_subject: dict = {}
    for k, s in enumerate(scans):
        if s.subject_id is None:
            raise StructureError(f"scan {s.scan_id!r} has no subject label")
        by_subject.setdefault(s.subject_id, []).append(k)
    partner = np.empty(len(scans), dtype=np.int64)
    for subj, ks in by_subject.items():
        if len(ks) != 2:
            raise StructureError(f"subject {subj!r} has {len(ks)} sessions; exactly 2 are required")
        a, b = ks
        if scans[a].session_index == scans[b].session_index:
            raise StructureError(f"subject {subj!r} has two scans labeled session {scans[a].session_index}")
        partner[a], partner[b] = b, a
    return Pairing(partner)


def load_manifest(path) -> list[ScanRecord]:
    """Read a JSON manifest; relative scan paths resolve against the manifest's directory."""
    with open(path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list) or not entries:
        raise FormatError("manifest must be a non-empty JSON array")
    base = os.path.dirname(os.path.abspath(path))
    scans = []
    for i, e in enumerate(entries):
        try:
            scan_path = e.get("path", "")
            if scan_path and not os.path.isabs(scan_path):
                scan_path = os.path.join(base, scan_path)
            fmt = e.get("format", "csv")
            if fmt not in ("nifti1", "csv"):
                raise FormatError(f"unsupported format {fmt!r}")
            session = e.get("session")
            scans.append(
                ScanRecord(
                    scan_id=str(e["scan_id"]),
                    subject_id=None if e.get("subject_id") is None else str(e["subject_id"]),
                    session_index=None if session is None else int(session),
                    tr_seconds=float(e["tr_seconds"]),
                    path=scan_path,
                    format=fmt,
                    n_timepoints=e.get("n_timepoints"),
                )
            )
        except KeyError as exc:
            raise FormatError(f"manifest entry {i} lacks field {exc}") from None
    return scans


def write_manifest(path, scans: Sequence[ScanRecord], relative_to=None) -> None:
    entries = []
    for s in scans:
        e = s.to_manifest_entry()
        if relative_to and e["path"]:
            e["path"] = os.path.relpath(e["path"], relative_to)
        if s.n_timepoints is not None:
            e["n_timepoints"] = s.n_timepoints
        entries.append(e)
    atomic_write_text(path, json.dumps(entries, indent=2) + "\n")


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
