"""Unsupervised test-retest pairing of scans by rank-sum minimization.

A pairing's fitness is the rank sum it induces on a rank matrix. The genetic
algorithm searches for the pairing with the smallest fitness; the exact
dynamic program certifies its answer for small cohorts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .graphs import infer_connectome
from .model import Pairing, Parcellation, PipelineConfig, ScanRecord, StructureError, TimeSeriesMatrix, true_pairing
from .reliability import RankMatrix, distance_matrix, rank_matrix

log = logging.getLogger(__name__)

EXACT_MAX_N = 26


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 200
    generations_max: int = 500
    mutation_rate: float = 0.2
    elitism_count: int = 4
    seed: int = 0
    stall_generations: int = 50

    def __post_init__(self):
        if self.population_size < 2 * self.elitism_count or self.population_size < 2:
            raise ValueError("population_size must be at least 2 * elitism_count")
        if not 0 <= self.mutation_rate <= 1:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if self.generations_max < 1 or self.stall_generations < 1:
            raise ValueError("generation limits must be positive")


class GaResult(NamedTuple):
    pairing: Pairing
    fitness: int
    generations: int
    history: list  # best fitness after each generation (index 0 = initial population)


def pairing_fitness(r: RankMatrix, p: Pairing) -> int:
    """Sum over scans of the rank each scan gives its assigned partner."""
    if p.n != r.n:
        raise StructureError(f"pairing covers {p.n} scans, rank matrix has {r.n}")
    return int(r.ranks[np.arange(r.n), p.partner].sum())


def pair_costs(r: RankMatrix) -> np.ndarray:
    """Symmetric cost of putting k and k' in one pair: ranks[k, k'] + ranks[k', k]."""
    return r.ranks + r.ranks.T


def exact_min_pairing(r: RankMatrix) -> tuple:
    """Globally optimal pairing by dynamic programming over sets of unpaired scans.

    The lowest unpaired scan is always matched next, so only Fibonacci-many
    subsets are ever visited. Among optimal pairings the lexicographically
    smallest partner array is returned.
    """
    n = r.n
    if n % 2:
        raise ValueError(f"cannot pair an odd number of scans ({n})")
    if n > EXACT_MAX_N:
        raise ValueError(f"exact pairing is limited to n <= {EXACT_MAX_N} (got {n}); use ga_sort")
    cost = pair_costs(r).tolist()
    memo = {0: 0}

    def best(s: int) -> int:
        v = memo.get(s)
        if v is not None:
            return v
        low = s & -s
        i = low.bit_length() - 1
        rest = s ^ low
        ci = cost[i]
        out = None
        m = rest
        while m:
            bit = m & -m
            val = ci[bit.bit_length() - 1] + best(rest ^ bit)
            if out is None or val < out:
                out = val
            m ^= bit
        memo[s] = out
        return out

    full = (1 << n) - 1
    total = best(full)
    partner = np.empty(n, dtype=np.int64)
    s = full
    while s:
        low = s & -s
        i = low.bit_length() - 1
        rest = s ^ low
        target = memo[s]
        m = rest
        while m:
            bit = m & -m
            j = bit.bit_length() - 1
            if cost[i][j] + memo[rest ^ bit] == target:
                partner[i], partner[j] = j, i
                s = rest ^ bit
                break
            m ^= bit
    return Pairing(partner), int(total)


def _pair_order(cost: np.ndarray) -> list:
    """All pairs (i < j) sorted by (cost, i, j): the greedy repair visits them in this order."""
    a, b = np.triu_indices(cost.shape[0], k=1)
    order = np.lexsort((b, a, cost[a, b]))
    return list(zip(a[order].tolist(), b[order].tolist()))


def _greedy_complete(partner: np.ndarray, pair_order: list) -> np.ndarray:
    """Pair the scans with ``partner == -1`` by repeatedly taking the cheapest free pair."""
    free = (partner < 0).tolist()
    left = sum(free)
    if left == 0:
        return partner
    for i, j in pair_order:
        if free[i] and free[j]:
            free[i] = free[j] = False
            partner[i], partner[j] = j, i
            left -= 2
            if left == 0:
                break
    return partner


def greedy_pairing(r: RankMatrix) -> Pairing:
    return Pairing(_greedy_complete(np.full(r.n, -1, dtype=np.int64), _pair_order(pair_costs(r))))


def _crossover(pa: np.ndarray, pb: np.ndarray, pair_order: list) -> np.ndarray:
    child = np.where(pa == pb, pa, -1)
    return _greedy_complete(child, pair_order)


def _mutate(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = p.size
    if n < 4:
        return p
    a = int(rng.integers(n))
    b = int(p[a])
    while True:
        c = int(rng.integers(n))
        if c != a and c != b:
            break
    d = int(p[c])
    q = p.copy()
    if rng.random() < 0.5:
        q[a], q[c], q[b], q[d] = c, a, d, b
    else:
        q[a], q[d], q[b], q[c] = d, a, c, b
    return q


def ga_sort(r: RankMatrix, cfg: Optional[GaConfig] = None) -> GaResult:
    """Search for the minimum-rank-sum pairing with a genetic algorithm.

    Chromosomes are partner arrays, so every individual is a valid pairing.
    Parents are picked by binary tournament; a child keeps the pairs its
    parents share and fills the rest greedily by symmetric cost; mutation
    swaps the partners of two pairs. The best ``elitism_count`` individuals
    survive unchanged. A child identical to one already in the next
    generation is replaced by a random pairing to keep the population
    diverse. The run stops after ``generations_max`` generations,
    after ``stall_generations`` without improvement, or on reaching the
    absolute minimum fitness n.
    """
    cfg = cfg or GaConfig()
    n = r.n
    if n % 2:
        raise ValueError(f"cannot pair an odd number of scans ({n})")
    if n < 4:
        if n == 2:
            p = Pairing(np.array([1, 0]))
            f = pairing_fitness(r, p)
            return GaResult(p, f, 0, [f])
        raise ValueError("need at least 2 scans")
    rng = np.random.default_rng(cfg.seed)
    order_pairs = _pair_order(pair_costs(r))
    ranks = r.ranks
    rows = np.arange(n)
    base = np.arange(n) ^ 1

    pop = np.empty((cfg.population_size, n), dtype=np.int64)
    pop[0] = greedy_pairing(r).partner
    for i in range(1, cfg.population_size):
        perm = rng.permutation(n)
        pop[i, perm] = perm[base]

    def fitness(P):
        return ranks[rows[None, :], P].sum(axis=1)

    fit = fitness(pop)
    best_i = int(np.argmin(fit))
    best, best_fit = pop[best_i].copy(), int(fit[best_i])
    history = [best_fit]
    stall = 0
    gen = 0
    while gen < cfg.generations_max and stall < cfg.stall_generations and best_fit > n:
        gen += 1
        order = np.argsort(fit, kind="stable")
        nxt = np.empty_like(pop)
        nxt[: cfg.elitism_count] = pop[order[: cfg.elitism_count]]
        n_child = cfg.population_size - cfg.elitism_count
        cand = rng.integers(cfg.population_size, size=(n_child, 2, 2))
        f_cand = fit[cand]
        winners = np.where(f_cand[..., 0] <= f_cand[..., 1], cand[..., 0], cand[..., 1])
        mutate = rng.random(n_child) < cfg.mutation_rate
        seen = {row.tobytes() for row in nxt[: cfg.elitism_count]}
        for c in range(n_child):
            child = _crossover(pop[winners[c, 0]], pop[winners[c, 1]], order_pairs)
            if mutate[c]:
                child = _mutate(child, rng)
            key = child.tobytes()
            if key in seen:
                # duplicates would collapse the population; replace with a random immigrant
                perm = rng.permutation(n)
                child = np.empty(n, dtype=np.int64)
                child[perm] = perm[base]
                key = child.tobytes()
            seen.add(key)
            nxt[cfg.elitism_count + c] = child
        pop = nxt
        fit = fitness(pop)
        i = int(np.argmin(fit))
        if fit[i] < best_fit:
            best, best_fit = pop[i].copy(), int(fit[i])
            stall = 0
        else:
            stall += 1
        history.append(best_fit)
    return GaResult(Pairing(best), best_fit, gen, history)


def sort_scans(r: RankMatrix, cfg: Optional[GaConfig] = None, certify: bool = True) -> dict:
    """GA pairing, plus exact-optimum certification when the cohort is small enough.

    When the exact optimum beats the GA, the exact pairing is reported as best.
    """
    ga = ga_sort(r, cfg)
    out = {"pairing": ga.pairing, "fitness": ga.fitness, "generations": ga.generations,
           "ga_fitness": ga.fitness, "exact_fitness": None, "exact_optimum_certified": None}
    if certify and r.n <= EXACT_MAX_N:
        exact_p, exact_f = exact_min_pairing(r)
        out["exact_fitness"] = exact_f
        out["exact_optimum_certified"] = ga.fitness == exact_f
        if exact_f < ga.fitness:
            out["pairing"], out["fitness"] = exact_p, exact_f
    return out


def rank_matrix_for(series: Sequence[TimeSeriesMatrix], parc: Parcellation, config: PipelineConfig) -> RankMatrix:
    graphs = [infer_connectome(ts, parc, config) for ts in series]
    return rank_matrix(distance_matrix(graphs, config.distance_metric))


def min_time_to_perfect_sort(series: Sequence[TimeSeriesMatrix], scans: Sequence[ScanRecord],
                             parc: Parcellation, config: PipelineConfig, time_grid_minutes: Sequence[float],
                             ga_config: Optional[GaConfig] = None, certify: bool = True):
    """Smallest acquisition time (minutes) at which sorting recovers every true pair, else None."""
    grid = list(time_grid_minutes)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("time grid must be strictly ascending")
    truth = true_pairing(scans)
    for t in grid:
        try:
            r = rank_matrix_for(series, parc, config.replace(window_seconds=60.0 * t))
            res = sort_scans(r, ga_config, certify=certify)
        except Exception as exc:
            raise type(exc)(f"at T = {t} min: {exc}") from exc
        if res["pairing"] == truth:
            return t
    return None


def subject_subsample_sweep(series: Sequence[TimeSeriesMatrix], scans: Sequence[ScanRecord],
                            parc: Parcellation, config: PipelineConfig, n_values: Sequence[int],
                            time_grid_minutes: Sequence[float], repeats: int = 20, seed: int = 0,
                            ga_config: Optional[GaConfig] = None) -> list:
    """Median minimal perfect-sort time over random subject subsets, per subset size.

    Returns one dict per N with the per-repeat times and their median (None
    when the median run never sorted perfectly). The full cohort is run once.
    """
    subjects = sorted({s.subject_id for s in scans})
    true_pairing(scans)
    out = []
    for ni, n_sub in enumerate(n_values):
        if n_sub > len(subjects):
            raise ValueError(f"N = {n_sub} exceeds the {len(subjects)} available subjects")
        if n_sub < 2:
            raise ValueError("need at least 2 subjects")
        n_rep = 1 if n_sub == len(subjects) else repeats
        times = []
        for rep in range(n_rep):
            rng = np.random.default_rng([seed, ni, rep])
            chosen = set(subjects) if n_rep == 1 else {subjects[i] for i in rng.choice(len(subjects), n_sub, replace=False)}
            keep = [k for k, s in enumerate(scans) if s.subject_id in chosen]
            t = min_time_to_perfect_sort([series[k] for k in keep], [scans[k] for k in keep], parc, config,
                                         time_grid_minutes, ga_config)
            times.append(t)
        vals = np.array([np.inf if t is None else t for t in times])
        med = float(np.median(vals))
        out.append({"N": n_sub, "times": times, "median": None if not np.isfinite(med) else med})
    return out
