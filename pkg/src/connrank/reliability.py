"""Rank-sum test-retest reliability.

For every scan, all other scans are ranked by graph distance (1 = nearest);
the statistic sums, over scans, the rank of each scan's true partner. It lies
in [n, n(n-1)] and reaches n exactly when every scan's nearest neighbour is
its own retest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import Connectome, Pairing, ShapeError, StateError, StructureError, true_pairing

METRICS = ("squared_frobenius", "l1")
TIE_RULE = "ascending_scan_index"


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    scan_ids: tuple = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"distance matrix must be square, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("distance matrix has non-finite entries")
        if np.any(v < 0):
            raise ValueError("distances must be nonnegative")
        if not np.allclose(v, v.T, rtol=1e-12, atol=0):
            raise ValueError("distance matrix is not symmetric")
        np.fill_diagonal(v, 0.0)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        ids = tuple(self.scan_ids) if len(self.scan_ids) else tuple(str(i) for i in range(v.shape[0]))
        object.__setattr__(self, "scan_ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class RankMatrix:
    """``ranks[k, j]`` = position of scan j among scan k's neighbours (1 = nearest); diagonal 0."""

    ranks: np.ndarray
    scan_ids: tuple = ()

    def __post_init__(self):
        r = np.array(self.ranks, dtype=np.int64)
        r.setflags(write=False)
        object.__setattr__(self, "ranks", r)
        if not len(self.scan_ids):
            object.__setattr__(self, "scan_ids", tuple(str(i) for i in range(r.shape[0])))

    @property
    def n(self) -> int:
        return self.ranks.shape[0]


@dataclass
class ReliabilityResult:
    rank_sum: int
    per_scan_rank: list
    n_scans: int
    null_samples: Optional[np.ndarray] = None
    p_value: Optional[float] = None
    seed: Optional[int] = None

    @property
    def n_permutations(self) -> Optional[int]:
        return None if self.null_samples is None else len(self.null_samples)

    def to_dict(self) -> dict:
        d = {
            "n_scans": self.n_scans,
            "rank_sum": int(self.rank_sum),
            "per_scan_rank": [int(r) for r in self.per_scan_rank],
            "p_value": self.p_value,
            "B": self.n_permutations,
            "seed": self.seed,
            "tie_rule": TIE_RULE,
        }
        if self.null_samples is not None:
            d["null_mean"] = float(np.mean(self.null_samples))
            d["null_min"] = int(np.min(self.null_samples))
        return d


@dataclass
class EdgeLocalization:
    edges: np.ndarray  # (E, 2) ROI index pairs, i < j
    edge_rank_sums: np.ndarray
    low_edge_threshold: float
    roi_scores: np.ndarray
    n_rois: int
    percentile: float = 5.0

    def matrix(self) -> np.ndarray:
        """Edge rank sums as a symmetric C x C matrix (diagonal 0)."""
        m = np.zeros((self.n_rois, self.n_rois))
        m[self.edges[:, 0], self.edges[:, 1]] = self.edge_rank_sums
        return m + m.T

    def low_edges(self) -> np.ndarray:
        return self.edges[self.edge_rank_sums < self.low_edge_threshold]


def graph_distance(a: Connectome, b: Connectome, metric: str = "squared_frobenius") -> float:
    """Distance between two connectomes using off-diagonal entries only."""
    if a.n_rois != b.n_rois:
        raise ShapeError(f"connectome sizes differ: {a.n_rois} vs {b.n_rois}")
    d = a.upper() - b.upper()
    if metric == "squared_frobenius":
        return 2.0 * float(d @ d)
    if metric == "l1":
        return 2.0 * float(np.abs(d).sum())
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def distance_matrix(graphs: Sequence[Connectome], metric: str = "squared_frobenius",
                    scan_ids: Sequence[str] = ()) -> DistanceMatrix:
    if len(graphs) < 2:
        raise ValueError("need at least two graphs")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    sizes = {g.n_rois for g in graphs}
    if len(sizes) > 1:
        first = graphs[0].n_rois
        bad = next(k for k, g in enumerate(graphs) if g.n_rois != first)
        raise ShapeError(f"graph 0 has {first} ROIs but graph {bad} has {graphs[bad].n_rois}")
    x = np.stack([g.upper() for g in graphs])
    if metric == "squared_frobenius":
        # exact pairwise differences (the Gram expansion loses precision near 0)
        d = np.empty((len(graphs), len(graphs)))
        for k in range(len(graphs)):
            diff = x - x[k]
            d[k] = np.einsum("ij,ij->i", diff, diff)
        d = 2.0 * d
    else:
        d = np.empty((len(graphs), len(graphs)))
        for k in range(len(graphs)):
            d[k] = 2.0 * np.abs(x - x[k]).sum(axis=1)
    d = (d + d.T) / 2
    ids = tuple(scan_ids) or tuple(g.scan_id or str(k) for k, g in enumerate(graphs))
    return DistanceMatrix(d, ids)


def _ranks_from_rows(d: np.ndarray) -> np.ndarray:
    n = d.shape[-1]
    work = np.array(d, dtype=float)
    idx = np.arange(n)
    work[..., idx, idx] = np.inf
    order = np.argsort(work, axis=-1, kind="stable")
    ranks = np.empty(work.shape, dtype=np.int64)
    np.put_along_axis(ranks, order, np.arange(1, n + 1), axis=-1)
    ranks[..., idx, idx] = 0
    return ranks


def rank_matrix(d: DistanceMatrix) -> RankMatrix:
    """Rank each row's off-diagonal distances ascending from 1; ties go to the lower scan index."""
    return RankMatrix(_ranks_from_rows(d.values), d.scan_ids)


def _check_pairing(n: int, pairing: Pairing) -> None:
    if pairing.n != n:
        raise StructureError(f"pairing covers {pairing.n} scans, rank matrix has {n}")


def rank_sum(r: RankMatrix, pairing: Pairing) -> ReliabilityResult:
    _check_pairing(r.n, pairing)
    per_scan = r.ranks[np.arange(r.n), pairing.partner]
    return ReliabilityResult(int(per_scan.sum()), per_scan.tolist(), r.n)


def random_pairing(n: int, rng: np.random.Generator, base: Optional[Pairing] = None) -> Pairing:
    """Uniformly random perfect matching, obtained by relabeling the scans of ``base``."""
    if base is None:
        base = Pairing(np.arange(n) ^ 1)
    perm = rng.permutation(n)
    partner = np.empty(n, dtype=np.int64)
    partner[perm] = perm[base.partner]
    return Pairing(partner)


def permutation_null(r: RankMatrix, pairing, n_permutations: int = 1000,
                     seed: int = 0) -> ReliabilityResult:
    """Rank sum with a label-permutation null and add-one p-value.

    Each replicate relabels scans by a uniform random permutation, which turns
    the true pairing into a uniform random pairing, and re-sums the fixed rank
    matrix. Replicate b draws from its own stream seeded by (seed, b).
    ``pairing`` may also be the labeled scan list the true pairing derives from.
    """
    if not isinstance(pairing, Pairing):
        pairing = true_pairing(pairing)
    if n_permutations < 100:
        raise ValueError(f"need at least 100 permutations for a stable p-value, got {n_permutations}")
    observed = rank_sum(r, pairing)
    n = r.n
    rows = np.arange(n)
    null = np.empty(n_permutations, dtype=np.int64)
    ranks = r.ranks
    for b in range(n_permutations):
        rng = np.random.default_rng([seed, b])
        perm = rng.permutation(n)
        partner = np.empty(n, dtype=np.int64)
        partner[perm] = perm[pairing.partner]
        null[b] = ranks[rows, partner].sum()
    p = (1 + int(np.count_nonzero(null <= observed.rank_sum))) / (n_permutations + 1)
    observed.null_samples = null
    observed.p_value = p
    observed.seed = seed
    return observed


def _edge_partner_ranks(values: np.ndarray, partner: np.ndarray) -> np.ndarray:
    """Rank of each scan's partner under per-edge scalar distances.

    ``values`` is (E, n). Returns (E, n) ranks with the same tie rule as
    :func:`rank_matrix`.
    """
    e, n = values.shape
    rows = np.arange(n)
    d = (values[:, :, None] - values[:, None, :]) ** 2  # (E, n, n)
    target = d[:, rows, partner]  # (E, n)
    less = d < target[:, :, None]
    tie_before = (d == target[:, :, None]) & (rows[None, None, :] < partner[None, :, None])
    # the diagonal never counts
    less[:, rows, rows] = False
    tie_before[:, rows, rows] = False
    return 1 + less.sum(axis=2) + tie_before.sum(axis=2)


def edgewise_rank_sums(graphs: Sequence[Connectome], pairing: Pairing, percentile: float = 5.0,
                       chunk_bytes: int = 1 << 27) -> EdgeLocalization:
    """Rank-sum statistic computed separately for every ROI pair.

    Edges whose rank sum falls strictly below the ``percentile``-th percentile
    of all edge rank sums count toward both endpoint ROIs' scores.
    """
    if any(g.thresholded for g in graphs):
        raise StateError("edge-wise localization needs unthresholded connectomes")
    n = len(graphs)
    _check_pairing(n, pairing)
    c = graphs[0].n_rois
    if any(g.n_rois != c for g in graphs):
        raise ShapeError("connectomes differ in size")
    iu = np.triu_indices(c, k=1)
    values = np.stack([g.weights[iu] for g in graphs], axis=1)  # (E, n)
    n_edges = values.shape[0]
    step = max(1, chunk_bytes // (8 * n * n * 3))
    sums = np.empty(n_edges, dtype=np.int64)
    for lo in range(0, n_edges, step):
        sums[lo : lo + step] = _edge_partner_ranks(values[lo : lo + step], pairing.partner).sum(axis=1)
    cutoff = float(np.percentile(sums, percentile))
    low = sums < cutoff
    scores = np.bincount(iu[0][low], minlength=c) + np.bincount(iu[1][low], minlength=c)
    return EdgeLocalization(np.column_stack(iu), sums, cutoff, scores, c, percentile)


def reliability(graphs: Sequence[Connectome], pairing: Pairing, metric: str = "squared_frobenius",
                n_permutations: Optional[int] = None, seed: int = 0):
    """Distance matrix, rank matrix and rank sum (with optional null) in one call."""
    d = distance_matrix(graphs, metric)
    r = rank_matrix(d)
    if n_permutations:
        return d, r, permutation_null(r, pairing, n_permutations, seed)
    return d, r, rank_sum(r, pairing)
