"""Retrieval metrics: CMC rank-k accuracy and mean average precision."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

RANKS = (1, 5, 10)


@dataclass
class EvalReport:
    cmc: dict[int, float]
    mAP: float
    average_precision: np.ndarray
    excluded_queries: list[int] = field(default_factory=list)

    @property
    def rank1(self) -> float:
        return self.cmc[1]

    def rows(self) -> list[tuple[str, float]]:
        rows = [(f"rank{k}", v) for k, v in sorted(self.cmc.items())]
        rows.append(("mAP", self.mAP))
        rows.append(("num_queries", float(len(self.average_precision))))
        rows.append(("excluded_queries", float(len(self.excluded_queries))))
        return rows


def euclidean_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    diff = query[:, None, :] - gallery[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _exact_ap(matches: np.ndarray) -> Fraction | None:
    hits = np.flatnonzero(matches)
    if len(hits) == 0:
        return None
    return sum((Fraction(k, int(r) + 1) for k, r in enumerate(hits, 1)), Fraction(0)) / len(hits)


def average_precision(matches: np.ndarray) -> float:
    """AP of one ranked boolean match list: mean precision at each hit.

    Summed in exact rational arithmetic and rounded once, so the value does
    not depend on summation order.
    """
    ap = _exact_ap(matches)
    return float("nan") if ap is None else float(ap)


def evaluate_distances(dist: np.ndarray, query_ids, gallery_ids, ignore: np.ndarray | None = None,
                       ranks=RANKS) -> EvalReport:
    """Rank the gallery by ascending distance per query (ties by gallery index).

    ``ignore`` ([Q, G] bool) drops gallery entries for a query, e.g. the query
    itself in leave-one-out evaluation. Queries without any positive are
    excluded and listed.
    """
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    hit_at = {k: 0 for k in ranks}
    aps, excluded = [], []
    for q in range(dist.shape[0]):
        keep = np.ones(dist.shape[1], dtype=bool) if ignore is None else ~ignore[q]
        cols = np.flatnonzero(keep)
        order = cols[np.argsort(dist[q, cols], kind="stable")]
        matches = gallery_ids[order] == query_ids[q]
        if not matches.any():
            excluded.append(q)
            continue
        first = int(np.argmax(matches))
        for k in ranks:
            hit_at[k] += first < k
        aps.append(_exact_ap(matches))
    n = len(aps)
    cmc = {k: float(Fraction(v, n)) if n else 0.0 for k, v in hit_at.items()}
    return EvalReport(cmc=cmc, mAP=float(sum(aps, Fraction(0)) / n) if n else 0.0,
                      average_precision=np.array([float(a) for a in aps]), excluded_queries=excluded)


def evaluate(model, query, gallery, batch_size: int = 64) -> EvalReport:
    """Describe query and gallery images with ``model`` and score the retrieval."""
    qf = model.descriptors(query.images, batch_size)
    gf = model.descriptors(gallery.images, batch_size)
    return evaluate_distances(euclidean_distances(qf, gf), query.labels, gallery.labels)


def evaluate_leave_one_out(features: np.ndarray, labels) -> EvalReport:
    """Every item queries all the others (training-set retrieval)."""
    dist = euclidean_distances(features, features)
    return evaluate_distances(dist, labels, labels, ignore=np.eye(len(features), dtype=bool))
