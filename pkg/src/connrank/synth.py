"""Synthetic test-retest cohorts with known subject separability.

Each subject gets a latent correlation matrix: a shared base structure plus
a subject-specific rank-2 perturbation scaled by ``subject_signal``. Each
session perturbs the latent matrix again (scaled by ``session_noise``) and
draws Gaussian ROI time-series with exactly that population correlation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ConnrankError, Pairing, ScanRecord, TimeSeriesMatrix, write_manifest
from .ingest import write_csv_timeseries


class DegenerateSpecError(ConnrankError):
    pass


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int = 20
    n_rois: int = 64
    n_timepoints: int = 300
    tr_seconds: float = 2.0
    subject_signal: float = 1.0
    session_noise: float = 0.05
    seed: int = 0
    n_sessions: int = 2
    base_factors: int = 4

    def __post_init__(self):
        if self.n_sessions != 2:
            raise ValueError("only test-retest (2-session) cohorts are supported")
        if self.n_subjects < 1:
            raise ValueError("need at least one subject")
        if self.n_rois < 2:
            raise ValueError("need at least 2 ROIs")
        if self.n_timepoints < self.n_rois + 2:
            raise ValueError(f"n_timepoints must be >= n_rois + 2 ({self.n_rois + 2}), got {self.n_timepoints}")
        if self.subject_signal < 0 or self.session_noise < 0:
            raise ValueError("noise parameters must be nonnegative")
        if not self.tr_seconds > 0:
            raise ValueError("tr_seconds must be positive")


def nearest_correlation(a: np.ndarray, max_iter: int = 100, tol: float = 1e-8) -> np.ndarray:
    """Nearest correlation matrix by alternating projections with Dykstra's correction.

    Alternates between clipping negative eigenvalues and resetting the
    diagonal to one, then finishes with an exact rescaling so the output is
    both PSD and unit-diagonal.
    """
    a = (np.asarray(a, dtype=float) + np.asarray(a, dtype=float).T) / 2
    y = a.copy()
    ds = np.zeros_like(a)
    for _ in range(max_iter):
        r = y - ds
        vals, vecs = np.linalg.eigh(r)
        x = (vecs * np.maximum(vals, 0)) @ vecs.T
        ds = x - r
        y_new = x.copy()
        np.fill_diagonal(y_new, 1.0)
        change = np.linalg.norm(y_new - y) / max(np.linalg.norm(y), 1e-300)
        y = y_new
        if change < tol:
            break
    vals, vecs = np.linalg.eigh((y + y.T) / 2)
    y = (vecs * np.maximum(vals, 0)) @ vecs.T
    d = np.sqrt(np.clip(np.diag(y), 1e-300, None))
    y = y / d[:, None] / d[None, :]
    y = (y + y.T) / 2
    np.fill_diagonal(y, 1.0)
    return y


def _rank2_perturbation(c: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric rank-2 update u u' - v v' with unit-variance entries in u, v, zero diagonal."""
    u = rng.standard_normal(c)
    v = rng.standard_normal(c)
    p = (np.outer(u, u) - np.outer(v, v)) / 2
    np.fill_diagonal(p, 0.0)
    return p


def base_correlation(spec: CohortSpec, rng: np.random.Generator) -> np.ndarray:
    k = max(1, min(spec.base_factors, spec.n_rois - 1))
    w = rng.standard_normal((spec.n_rois, k)) / np.sqrt(k)
    cov = w @ w.T + np.eye(spec.n_rois)
    d = np.sqrt(np.diag(cov))
    return cov / d[:, None] / d[None, :]


def perturb(latent: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Latent plus a scaled rank-2 perturbation, projected back to a correlation matrix.

    Entries of the perturbation have standard deviation ~ ``scale / 2``.
    """
    if scale == 0:
        return latent.copy()
    return nearest_correlation(latent + scale * _rank2_perturbation(latent.shape[0], rng) / 2)


def _streams(spec: CohortSpec):
    ss = np.random.SeedSequence(spec.seed)
    base_ss, subj_ss, sess_ss = ss.spawn(3)
    return base_ss, subj_ss.spawn(spec.n_subjects), [s.spawn(2) for s in sess_ss.spawn(spec.n_subjects)]


def generate_latent_connectomes(spec: CohortSpec) -> list:
    base_ss, subj_ss, _ = _streams(spec)
    base = base_correlation(spec, np.random.default_rng(base_ss))
    return [perturb(base, spec.subject_signal, np.random.default_rng(s)) for s in subj_ss]


def correlation_factor(target: np.ndarray, max_jitter: int = 8) -> np.ndarray:
    """Lower factor L with L L' = target; retries with growing diagonal jitter."""
    jitter = 0.0
    for attempt in range(max_jitter + 1):
        try:
            return np.linalg.cholesky(target + jitter * np.eye(target.shape[0]))
        except np.linalg.LinAlgError:
            jitter = 1e-12 if attempt == 0 else jitter * 10
    raise DegenerateSpecError(f"target matrix is not positive definite even with jitter {jitter:g}")


def session_target(latent: np.ndarray, spec: CohortSpec, session_rng: np.random.Generator) -> np.ndarray:
    return perturb(latent, spec.session_noise, session_rng)


def sample_session_timeseries(latent: np.ndarray, spec: CohortSpec, session_rng: np.random.Generator,
                              return_target: bool = False):
    """Draw an ROI x time matrix whose population correlation is a session-perturbed ``latent``."""
    target = session_target(latent, spec, session_rng)
    factor = correlation_factor(target)
    z = session_rng.standard_normal((spec.n_rois, spec.n_timepoints))
    ts = TimeSeriesMatrix(factor @ z, spec.tr_seconds)
    return (ts, target) if return_target else ts


def generate_cohort(spec: CohortSpec, latents: Optional[list] = None):
    """Scans (subject-major, session 1 then 2), their ROI series, and the true pairing."""
    _, _, sess_ss = _streams(spec)
    latents = generate_latent_connectomes(spec) if latents is None else latents
    scans, series = [], []
    for i, lat in enumerate(latents):
        for s in range(2):
            rng = np.random.default_rng(sess_ss[i][s])
            series.append(sample_session_timeseries(lat, spec, rng))
            scans.append(ScanRecord(
                scan_id=f"sub-{i + 1:03d}_ses-{s + 1}",
                subject_id=f"sub-{i + 1:03d}",
                session_index=s + 1,
                tr_seconds=spec.tr_seconds,
                n_timepoints=spec.n_timepoints,
            ))
    pairing = Pairing(np.arange(2 * len(latents)) ^ 1)
    return scans, series, pairing


def single_edge_latents(spec: CohortSpec, edge=(0, 1), spread: float = 0.6) -> list:
    """Latent matrices identical across subjects except for one edge.

    The edge value of each subject is evenly spaced in ``[-spread, spread]``
    (in shuffled order), so only that edge identifies subjects.
    """
    base_ss, subj_ss, _ = _streams(spec)
    rng = np.random.default_rng(base_ss)
    c = spec.n_rois
    base = np.eye(c)
    i, j = edge
    values = rng.permutation(np.linspace(-spread, spread, spec.n_subjects))
    out = []
    for v in values:
        m = base.copy()
        m[i, j] = m[j, i] = v
        out.append(m)
    return out


def write_cohort(out_dir, scans, series, manifest_name: str = "manifest.json") -> str:
    """Write one CSV per scan plus a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    series_dir = os.path.join(out_dir, "series")
    os.makedirs(series_dir, exist_ok=True)
    written = []
    for s, ts in zip(scans, series):
        path = os.path.join(series_dir, f"{s.scan_id}.csv")
        write_csv_timeseries(path, ts.values)
        written.append(ScanRecord(s.scan_id, s.subject_id, s.session_index, s.tr_seconds,
                                  path=path, format="csv", n_timepoints=ts.n_timepoints))
    manifest = os.path.join(out_dir, manifest_name)
    write_manifest(manifest, written, relative_to=out_dir)
    return manifest
