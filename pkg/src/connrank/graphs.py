"""Connectome inference: ROI time-course extraction, Pearson adjacency, thresholding."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from typing import Optional

import numpy as np

from .model import (
    Connectome,
    DegenerateError,
    Parcellation,
    PipelineConfig,
    ShapeError,
    StateError,
    TimeSeriesMatrix,
)

log = logging.getLogger(__name__)

EIG_TOL = 1e-10
EIG_MAX_ITER = 1000


def window_truncate(ts: TimeSeriesMatrix, window_seconds: float) -> TimeSeriesMatrix:
    """Keep the first ``floor(window / TR)`` samples (the whole scan if it is shorter)."""
    # small slack so e.g. 60 / 0.6 does not floor to 99 through rounding
    n_keep = int(math.floor(window_seconds / ts.tr_seconds + 1e-9))
    if n_keep < 2:
        raise ValueError(
            f"window of {window_seconds}s holds fewer than 2 samples at TR {ts.tr_seconds}s"
        )
    if n_keep >= ts.n_timepoints:
        return ts
    return TimeSeriesMatrix(ts.values[:, :n_keep], ts.tr_seconds, ts.row_ids)


def _cell_rows(ts: TimeSeriesMatrix, parc: Parcellation) -> np.ndarray:
    row_labels = parc.row_labels
    if row_labels.size != ts.n_rows:
        raise ShapeError(
            f"time-series has {ts.n_rows} rows but the parcellation labels {row_labels.size} voxels"
        )
    return row_labels


def extract_mean(ts: TimeSeriesMatrix, parc: Parcellation) -> TimeSeriesMatrix:
    """Average the voxel rows of each cell."""
    row_labels = _cell_rows(ts, parc)
    sums = np.zeros((parc.n_cells, ts.n_timepoints))
    np.add.at(sums, row_labels - 1, ts.values)
    counts = np.bincount(row_labels - 1, minlength=parc.n_cells)
    return TimeSeriesMatrix(sums / counts[:, None], ts.tr_seconds, tuple(range(1, parc.n_cells + 1)))


def leading_component(x: np.ndarray, tol: float = EIG_TOL, max_iter: int = EIG_MAX_ITER) -> np.ndarray:
    """Projection of row-centered ``x`` (voxels x time) onto its first principal axis.

    Power iteration on the smaller Gram matrix; stops when the unit iterate
    moves by less than ``tol``. If that does not happen within ``max_iter``
    steps (tiny eigengap) the dense symmetric eigensolver finishes the job;
    otherwise two shifted inverse-iteration steps polish the vector.
    """
    xc = x - x.mean(axis=1, keepdims=True)
    p, n = xc.shape
    use_time = p > n
    gram = xc.T @ xc if use_time else xc @ xc.T
    scale = np.abs(gram).max()
    if scale == 0:
        raise DegenerateError("submatrix has zero variance")
    g = gram / scale
    # deterministic start: the diagonal carries every direction with nonzero variance
    v = np.sqrt(np.diag(g)).copy()
    v /= np.linalg.norm(v)
    converged = False
    for _ in range(max_iter):
        w = g @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        w /= nw
        if np.linalg.norm(w - v) < tol:
            v = w
            converged = True
            break
        v = w
    if not converged:
        log.debug("power iteration did not converge in %d steps; using dense eigensolver", max_iter)
        _, vecs = np.linalg.eigh(g)
        v = vecs[:, -1]
    else:
        # the step size understates the error when the eigengap is small; polish by inverse
        # iteration shifted just above the Rayleigh quotient (an exact shift would be singular)
        eye = np.eye(g.shape[0])
        for _ in range(2):
            mu = float(v @ g @ v) * (1 + 1e-10) + 1e-14
            try:
                y = np.linalg.solve(g - mu * eye, v)
            except np.linalg.LinAlgError:
                break
            ny = np.linalg.norm(y)
            if not np.isfinite(ny) or ny == 0:
                break
            y /= ny
            v = y if y @ v >= 0 else -y
    if use_time:
        # xc^T xc v = s^2 v  ->  projection u^T xc = s v
        return np.sqrt(max(float(v @ gram @ v), 0.0)) * v
    return v @ xc


def extract_eigenvariate(ts: TimeSeriesMatrix, parc: Parcellation) -> TimeSeriesMatrix:
    """First-principal-component time-course of each cell.

    Sign is chosen so the result correlates nonnegatively with the cell mean.
    """
    row_labels = _cell_rows(ts, parc)
    out = np.empty((parc.n_cells, ts.n_timepoints))
    order = np.argsort(row_labels, kind="stable")
    bounds = np.searchsorted(row_labels[order], np.arange(1, parc.n_cells + 2))
    for c in range(parc.n_cells):
        rows = order[bounds[c] : bounds[c + 1]]
        x = ts.values[rows]
        try:
            comp = leading_component(x)
        except DegenerateError:
            raise DegenerateError(f"cell {c + 1}: every voxel time-series is constant") from None
        mean = x.mean(axis=0)
        if np.dot(comp - comp.mean(), mean - mean.mean()) < 0:
            comp = -comp
        out[c] = comp
    return TimeSeriesMatrix(out, ts.tr_seconds, tuple(range(1, parc.n_cells + 1)))


def pearson_adjacency(roi_ts: TimeSeriesMatrix) -> Connectome:
    """Sample Pearson correlation between every pair of ROI rows, diagonal set to 0."""
    y = roi_ts.values
    c, n = y.shape
    if c < 2:
        raise ShapeError(f"need at least 2 ROIs, got {c}")
    if n < 3:
        raise ShapeError(f"need at least 3 timepoints, got {n}")
    yc = y - y.mean(axis=1, keepdims=True)
    ss = np.sqrt(np.einsum("ij,ij->i", yc, yc))
    # a row whose spread is at rounding level of its magnitude is constant
    flat = ss <= 1e-12 * np.maximum(np.abs(y).max(axis=1), 1e-300) * math.sqrt(n)
    if np.any(flat):
        bad = int(np.flatnonzero(flat)[0])
        raise DegenerateError(f"ROI {roi_ts.row_ids[bad]} has a constant time-series")
    z = yc / ss[:, None]
    w = z @ z.T
    w = np.clip((w + w.T) / 2, -1.0, 1.0)
    np.fill_diagonal(w, 0.0)
    return Connectome(w)


def percentile_threshold(g: Connectome, q: Optional[float], absolute: bool = False) -> Connectome:
    """Zero every weight at or below the q-th percentile of this matrix's own edge weights.

    ``q`` of 0 or None means no threshold and returns ``g`` unchanged. The
    comparison uses signed weights unless ``absolute`` is set.
    """
    if g.thresholded:
        raise StateError("connectome is already thresholded")
    if q is None or q == 0:
        return g
    if not 0 < q < 100:
        raise ValueError(f"percentile must be in [0, 100), got {q}")
    w = np.array(g.weights)
    key = np.abs(w) if absolute else w
    tau = float(np.percentile(key[np.triu_indices(g.n_rois, k=1)], q))
    w[key <= tau] = 0.0
    np.fill_diagonal(w, 0.0)
    return Connectome(w, threshold=tau, scan_id=g.scan_id)


def infer_connectome(ts: TimeSeriesMatrix, parc: Parcellation, config: PipelineConfig,
                     scan_id: str = "") -> Connectome:
    """Window, reduce to ROIs, correlate and (optionally) threshold one scan."""
    if config.window_seconds is not None:
        ts = window_truncate(ts, config.window_seconds)
    if parc.scheme_tag == "identity":
        if parc.n_cells != ts.n_rows:
            raise ShapeError(f"identity parcellation of {parc.n_cells} rows for {ts.n_rows} signals")
        roi = ts
    elif config.extraction == "mean":
        roi = extract_mean(ts, parc)
    else:
        roi = extract_eigenvariate(ts, parc)
    g = pearson_adjacency(roi)
    g = Connectome(g.weights, scan_id=scan_id)
    if config.threshold:
        g = percentile_threshold(g, config.threshold, absolute=config.absolute_threshold)
    return g


def write_connectome_csv(path, g: Connectome) -> None:
    np.savetxt(path, g.weights, delimiter=",", fmt="%.17g")


class ConnectomeCache:
    """On-disk cache of connectomes keyed by (scan_id, config hash).

    Layout: ``<root>/<config_hash>/<scan_id>.npz`` plus ``meta.json`` holding
    the config. Writes go through a temp file and rename.
    """

    def __init__(self, root):
        self.root = root

    def _dir(self, config_hash: str) -> str:
        return os.path.join(self.root, config_hash)

    @staticmethod
    def _fname(scan_id: str) -> str:
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in scan_id)
        digest = hashlib.sha1(scan_id.encode()).hexdigest()[:8]
        return f"{safe}-{digest}.npz"

    def path(self, scan_id: str, config_hash: str) -> str:
        return os.path.join(self._dir(config_hash), self._fname(scan_id))

    def get(self, scan_id: str, config_hash: str) -> Optional[Connectome]:
        p = self.path(scan_id, config_hash)
        if not os.path.exists(p):
            return None
        with np.load(p) as z:
            tau = float(z["threshold"]) if z["has_threshold"] else None
            return Connectome(z["weights"], threshold=tau, scan_id=scan_id)

    def put(self, g: Connectome, config_hash: str, config: Optional[dict] = None, extra: Optional[dict] = None) -> str:
        d = self._dir(config_hash)
        os.makedirs(d, exist_ok=True)
        meta = os.path.join(d, "meta.json")
        if config is not None and not os.path.exists(meta):
            tmp = f"{meta}.tmp{os.getpid()}"
            with open(tmp, "w") as fh:
                json.dump({"config": config, **(extra or {})}, fh, indent=2, sort_keys=True)
            os.replace(tmp, meta)
        p = self.path(g.scan_id, config_hash)
        tmp = f"{p}.tmp{os.getpid()}.npz"
        np.savez(tmp, weights=g.weights, has_threshold=g.thresholded,
                 threshold=np.nan if g.threshold is None else g.threshold)
        os.replace(tmp, p)
        return p
