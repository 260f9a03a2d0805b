"""Retrieval evaluation: cosine ranking, CMC / Rank-1 and mean average precision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import QueryGallerySplit
from .errors import ConfigError, EvalError
from .nn import Encoder, forward_encoder, l2_normalize

PLANS = ("leave_one_out", "reduced_sources", "source_domains")


@dataclass
class RankingResult:
    """Gallery order (ascending cosine distance, ties by gallery index) per query."""

    order: np.ndarray
    matches: np.ndarray

    @property
    def num_queries(self) -> int:
        return self.order.shape[0]

    @property
    def gallery_size(self) -> int:
        return self.order.shape[1]


@dataclass
class MetricsReport:
    map: float
    rank1: float
    cmc: np.ndarray
    num_queries: int


def rank_gallery(encoder: Encoder, split: QueryGallerySplit) -> RankingResult:
    """Rank every gallery item for every query by cosine distance on unit features."""
    if split.gallery_size == 0:
        raise EvalError("empty gallery")
    if split.num_queries == 0:
        raise EvalError("empty query set")
    q = l2_normalize(forward_encoder(encoder, split.query_features))
    g = l2_normalize(forward_encoder(encoder, split.gallery_features))
    dist = 1.0 - q @ g.T
    order = np.argsort(dist, axis=1, kind="stable")
    matches = split.gallery_ids[order] == split.query_ids[:, None]
    return RankingResult(order, matches)


def compute_map(ranking: RankingResult) -> float:
    """Mean over queries of mean precision at each relevant rank (uninterpolated)."""
    matches = ranking.matches
    relevant = matches.sum(axis=1)
    if np.any(relevant == 0):
        raise EvalError("a query has no relevant gallery item (split contract violation)")
    hits = matches.cumsum(axis=1)
    ranks = np.arange(1, matches.shape[1] + 1)
    precision = hits / ranks
    ap = (precision * matches).sum(axis=1) / relevant
    return float(ap.mean())


def compute_cmc(ranking: RankingResult, max_rank: int) -> np.ndarray:
    """cmc[r] is the fraction of queries with a relevant item within rank r+1."""
    if not (1 <= max_rank <= ranking.gallery_size):
        raise EvalError(f"max_rank must lie in [1, {ranking.gallery_size}]")
    found = ranking.matches.cumsum(axis=1) > 0
    return found[:, :max_rank].mean(axis=0)


def evaluate_split(encoder: Encoder, split: QueryGallerySplit,
                   max_rank: int | None = None) -> MetricsReport:
    ranking = rank_gallery(encoder, split)
    if max_rank is None:
        max_rank = min(10, ranking.gallery_size)
    cmc = compute_cmc(ranking, max_rank)
    return MetricsReport(map=compute_map(ranking), rank1=float(cmc[0]),
                         cmc=cmc, num_queries=ranking.num_queries)


def evaluate_plan(encoder: Encoder, plan: str,
                  source_splits: dict[int, QueryGallerySplit],
                  target_split: QueryGallerySplit | None,
                  max_rank: int | None = None) -> dict[int, MetricsReport]:
    """Metrics per tested domain under one of the three protocol plans.

    ``leave_one_out`` and ``reduced_sources`` test the held-out target domain
    (for the latter the source reduction happens at training setup);
    ``source_domains`` tests each source's held-out split.
    """
    if plan not in PLANS:
        raise ConfigError(f"unknown evaluation plan {plan!r}")
    if plan in ("leave_one_out", "reduced_sources"):
        if target_split is None:
            raise EvalError(f"plan {plan!r} needs a target split")
        return {target_split.domain_id: evaluate_split(encoder, target_split, max_rank)}
    return {dom: evaluate_split(encoder, split, max_rank)
            for dom, split in sorted(source_splits.items())}
