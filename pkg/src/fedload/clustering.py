"""Pearson-correlation computation and correlation-maximizing federation selection.

Federations are bundles of clients whose training series correlate strongly;
the selection maximizes the mean pairwise Pearson coefficient over the chosen
set, exhaustively for small pools and with a seeded beam search otherwise.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .seeding import rng_for

# Exhaustive subset search is used while C(pool, k) stays under this budget.
EXHAUSTIVE_LIMIT = 200_000


class CorrelationError(ValueError):
    pass


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationMatrix:
    client_ids: tuple[str, ...]
    matrix: np.ndarray

    def pair(self, a: str, b: str) -> float:
        i, j = self.client_ids.index(a), self.client_ids.index(b)
        return float(self.matrix[i, j])

    def mean_pairwise(self, ids) -> float:
        idx = [self.client_ids.index(c) for c in ids]
        if len(idx) < 2:
            raise SelectionError("need at least two clients for a correlation rate")
        pairs = [self.matrix[i, j] for i, j in itertools.combinations(idx, 2)]
        return float(np.mean(pairs))


@dataclass(frozen=True)
class FederationSelection:
    client_ids: tuple[str, ...]
    correlation_rate: float

    def to_json_dict(self) -> dict:
        return {"ids": list(self.client_ids), "correlation_rate": self.correlation_rate}


def pearson(x, y) -> float:
    """Sample Pearson coefficient of two equal-length, non-constant series."""
    xv = np.asarray(x, dtype=float).ravel()
    yv = np.asarray(y, dtype=float).ravel()
    if xv.size != yv.size:
        raise CorrelationError(f"length mismatch: {xv.size} vs {yv.size}")
    if xv.size < 2:
        raise CorrelationError("need at least two samples")
    dx = xv - xv.mean()
    dy = yv - yv.mean()
    sx = float(np.sqrt((dx * dx).sum()))
    sy = float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        raise CorrelationError("correlation undefined for a constant series")
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def correlation_matrix(client_ids, series) -> CorrelationMatrix:
    """All-pairs Pearson matrix over the clients' training series.

    Pairs involving a constant series are marked invalid with NaN rather
    than failing the whole matrix.
    """
    ids = tuple(client_ids)
    if len(ids) < 2:
        raise CorrelationError("need at least two clients")
    if len(ids) != len(series):
        raise CorrelationError("one series per client id required")
    arrays = [np.asarray(s, dtype=float).ravel() for s in series]
    n = len(ids)
    m = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            try:
                m[i, j] = m[j, i] = pearson(arrays[i], arrays[j])
            except CorrelationError:
                m[i, j] = m[j, i] = np.nan
    return CorrelationMatrix(client_ids=ids, matrix=m)


def _mean_pair_score(matrix: np.ndarray, idx: tuple[int, ...]) -> float:
    vals = [matrix[i, j] for i, j in itertools.combinations(idx, 2)]
    if any(np.isnan(v) for v in vals):
        return -np.inf
    return float(np.mean(vals))


def _beam_search(matrix: np.ndarray, candidates: list[int], k: int, seed: int, width: int = 16):
    """Greedy beam over subsets, seeded only for tie-breaking among equal pairs."""
    rng = rng_for(seed, "beam")
    pairs = sorted(
        itertools.combinations(candidates, 2),
        key=lambda p: (-matrix[p[0], p[1]], rng.random()),
    )
    beam = [tuple(sorted(p)) for p in pairs[:width]]
    while beam and len(beam[0]) < k:
        grown = set()
        for subset in beam:
            for c in candidates:
                if c not in subset:
                    grown.add(tuple(sorted(subset + (c,))))
        beam = sorted(grown, key=lambda s: -_mean_pair_score(matrix, s))[:width]
    if not beam:
        raise SelectionError("beam search found no candidate subset")
    return max(beam, key=lambda s: _mean_pair_score(matrix, s))


def select_federation(
    corr: CorrelationMatrix,
    k: int,
    group_filter=None,
    groups: dict[str, str] | None = None,
    seed: int = 0,
) -> FederationSelection:
    """Pick the k clients whose mean pairwise correlation is highest.

    `group_filter` restricts the pool to clients whose label (looked up in
    `groups`) is in the filter. Search is exhaustive while the number of
    subsets stays under EXHAUSTIVE_LIMIT, then falls back to a beam search.
    """
    pool = list(range(len(corr.client_ids)))
    if group_filter is not None:
        if groups is None:
            raise SelectionError("group_filter given but no group labels")
        allowed = set(group_filter)
        pool = [i for i in pool if groups.get(corr.client_ids[i]) in allowed]
    if k < 2:
        raise SelectionError("federation size must be >= 2")
    if len(pool) < k:
        raise SelectionError(f"only {len(pool)} clients in the filtered pool, need {k}")

    from math import comb

    if comb(len(pool), k) <= EXHAUSTIVE_LIMIT:
        best = max(itertools.combinations(pool, k), key=lambda s: _mean_pair_score(corr.matrix, s))
    else:
        best = _beam_search(corr.matrix, pool, k, seed)
    rate = _mean_pair_score(corr.matrix, best)
    if not np.isfinite(rate):
        raise SelectionError("no subset with defined pairwise correlations")
    ids = tuple(corr.client_ids[i] for i in sorted(best))
    return FederationSelection(client_ids=ids, correlation_rate=rate)
