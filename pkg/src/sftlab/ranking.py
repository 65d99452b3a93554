"""Retrieval: ranking, CMC/mAP evaluation and re-ranking.

The protocol is the standard single-query one: gallery items sharing
both identity and camera with the query are junk and never appear in its
ranking; a correct match is a same-identity item from a different
camera.  Ordering is always deterministic, ties break by ascending
gallery index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetManifest, FeatureMatrix
from .transform import _check_sigma, cosine_between, sft_transform_array

log = logging.getLogger(__name__)

CMC_RANKS = (1, 5, 10)


@dataclass(frozen=True)
class QueryRanking:
    """One query's gallery ordering: indices into the gallery rows."""

    query_index: int
    gallery_indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.gallery_indices, dtype=np.int64)
        sc = np.asarray(self.scores, dtype=np.float64)
        if idx.ndim != 1 or idx.shape != sc.shape:
            raise ValueError("indices and scores must be matching 1-d vectors")
        if np.unique(idx).size != idx.size:
            raise ValueError("duplicate gallery index in ranking")
        idx.setflags(write=False)
        sc.setflags(write=False)
        object.__setattr__(self, "gallery_indices", idx)
        object.__setattr__(self, "scores", sc)


@dataclass(frozen=True)
class RankingList:
    queries: tuple[QueryRanking, ...]

    def __len__(self) -> int:
        return len(self.queries)


@dataclass(frozen=True)
class EvalReport:
    map_score: float
    cmc: dict[int, float]
    per_query_ap: tuple[float, ...]
    num_queries: int
    config: dict = field(default_factory=dict)


def _eval_records(manifest: DatasetManifest):
    queries = manifest.subset("query")
    gallery = manifest.subset("gallery")
    if not queries:
        raise ValueError("manifest has no query records")
    if not gallery:
        raise ValueError("manifest has no gallery records")
    return queries, gallery


def rank(queries: FeatureMatrix, gallery: FeatureMatrix, manifest: DatasetManifest) -> RankingList:
    """Per query, gallery sorted by cosine (descending), junk removed."""
    query_recs, gallery_recs = _eval_records(manifest)
    if len(query_recs) != queries.n:
        raise ValueError(
            f"{queries.n} query rows but manifest lists {len(query_recs)} query records"
        )
    if len(gallery_recs) != gallery.n:
        raise ValueError(
            f"{gallery.n} gallery rows but manifest lists {len(gallery_recs)} gallery records"
        )
    if queries.d != gallery.d:
        raise ValueError(f"dimension mismatch: {queries.d} vs {gallery.d}")
    sims = cosine_between(queries.data, gallery.data)
    g_ident = np.array([r.identity for r in gallery_recs])
    g_cam = np.array([r.camera for r in gallery_recs])
    out = []
    for qi, rec in enumerate(query_recs):
        junk = (g_ident == rec.identity) & (g_cam == rec.camera)
        valid = np.flatnonzero(~junk)
        if valid.size == 0:
            raise ValueError(f"query {rec.sample_id!r} has no valid gallery")
        # primary key: score descending; ties: gallery index ascending
        order = valid[np.lexsort((valid, -sims[qi, valid]))]
        out.append(QueryRanking(qi, order, sims[qi, order]))
    return RankingList(tuple(out))


def evaluate(ranking: RankingList, manifest: DatasetManifest, config: dict | None = None) -> EvalReport:
    """Average precision per query, mAP and CMC at the standard ranks."""
    query_recs, gallery_recs = _eval_records(manifest)
    g_ident = np.array([r.identity for r in gallery_recs])
    aps = []
    first_hit = []
    for qr in ranking.queries:
        rec = query_recs[qr.query_index]
        relevant = g_ident[qr.gallery_indices] == rec.identity
        num_rel = int(relevant.sum())
        if num_rel == 0:
            raise ValueError(f"query {rec.sample_id!r} has no relevant gallery items")
        hits = np.cumsum(relevant)
        positions = np.flatnonzero(relevant)
        precision_at_hits = hits[positions] / (positions + 1)
        aps.append(float(precision_at_hits.mean()))
        first_hit.append(int(positions[0]) + 1)
    first_hit = np.array(first_hit)
    cmc = {r: float((first_hit <= r).mean()) for r in CMC_RANKS}
    return EvalReport(
        map_score=float(np.mean(aps)),
        cmc=cmc,
        per_query_ap=tuple(aps),
        num_queries=len(ranking.queries),
        config=dict(config or {}),
    )


def sft_refine(query_feat: np.ndarray, ranking: QueryRanking, gallery: FeatureMatrix,
               top_n: int, sigma: float) -> QueryRanking:
    """Re-rank the top-n prefix in the spectrally transformed space.

    The query joins the top-n gallery features as an (n+1)-th graph node
    so both sides of the recomputed cosine live in the same transformed
    space.  Items beyond the prefix keep their order and scores.
    """
    sigma = _check_sigma(sigma)
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    query_feat = np.asarray(query_feat, dtype=np.float64).reshape(-1)
    if query_feat.size != gallery.d:
        raise ValueError(f"query feature has dim {query_feat.size}, gallery {gallery.d}")
    size = ranking.gallery_indices.size
    if top_n > size:
        log.warning("top_n=%d exceeds ranking length %d, clamping", top_n, size)
        top_n = size
    head = ranking.gallery_indices[:top_n]
    nodes = np.vstack([query_feat[None, :], gallery.data[head]])
    transformed = sft_transform_array(nodes, sigma)
    new_scores = cosine_between(transformed[:1], transformed[1:])[0]
    order = np.argsort(-new_scores, kind="stable")  # ties keep current order
    indices = np.concatenate([head[order], ranking.gallery_indices[top_n:]])
    scores = np.concatenate([new_scores[order], ranking.scores[top_n:]])
    return QueryRanking(ranking.query_index, indices, scores)


def refine_ranking(queries: FeatureMatrix, ranking: RankingList, gallery: FeatureMatrix,
                   top_n: int, sigma: float) -> RankingList:
    """Apply :func:`sft_refine` to every query of a ranking."""
    refined = tuple(
        sft_refine(queries.data[qr.query_index], qr, gallery, top_n, sigma)
        for qr in ranking.queries
    )
    return RankingList(refined)


def _k_reciprocal_sets(order: np.ndarray, k: int) -> list[set[int]]:
    """R(i, k): i's k-nearest neighbors j (self included) with i among j's."""
    n = order.shape[0]
    forward = [set(order[i, : k + 1].tolist()) for i in range(n)]
    return [{j for j in forward[i] if i in forward[j]} for i in range(n)]


def k_reciprocal_rerank(queries: FeatureMatrix, gallery: FeatureMatrix,
                        manifest: DatasetManifest, k1: int = 20, k2: int = 6,
                        lam: float = 0.3) -> RankingList:
    """Re-rank with Jaccard distance over expanded k-reciprocal encodings.

    Distances are computed on the union of query and gallery rows.  The
    final per-pair distance is ``lam * (1 - cosine) + (1 - lam) *
    jaccard``; with lam=1 the ordering reduces to the plain cosine
    ranking.  Junk items are removed per query exactly as in
    :func:`rank`.
    """
    if not k1 > k2 >= 1:
        raise ValueError(f"need k1 > k2 >= 1, got k1={k1}, k2={k2}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    query_recs, gallery_recs = _eval_records(manifest)
    if len(query_recs) != queries.n or len(gallery_recs) != gallery.n:
        raise ValueError("feature row counts do not match manifest query/gallery records")
    n_q = queries.n
    union = np.vstack([queries.data, gallery.data])
    n = union.shape[0]
    dist = 1.0 - cosine_between(union, union)
    k1 = min(k1, n - 1)
    k2 = min(k2, k1)
    # stable neighbor order: distance ascending, index ascending on ties
    order = np.stack([np.lexsort((np.arange(n), dist[i])) for i in range(n)])

    recip = _k_reciprocal_sets(order, k1)
    half = _k_reciprocal_sets(order, int(round(k1 / 2.0)))
    encodings = np.zeros((n, n))
    for i in range(n):
        expanded = set(recip[i])
        for j in sorted(recip[i]):
            if len(half[j] & recip[i]) >= (2.0 / 3.0) * len(half[j]):
                expanded |= half[j]
        members = np.array(sorted(expanded))
        weights = np.exp(-dist[i, members])
        encodings[i, members] = weights / weights.sum()
    if k2 > 1:
        encodings = np.stack([encodings[order[i, :k2]].mean(axis=0) for i in range(n)])

    jaccard = np.zeros((n_q, n - n_q))
    for qi in range(n_q):
        minimum = np.minimum(encodings[qi][None, :], encodings[n_q:]).sum(axis=1)
        maximum = np.maximum(encodings[qi][None, :], encodings[n_q:]).sum(axis=1)
        jaccard[qi] = 1.0 - minimum / maximum

    final = lam * dist[:n_q, n_q:] + (1.0 - lam) * jaccard
    g_ident = np.array([r.identity for r in gallery_recs])
    g_cam = np.array([r.camera for r in gallery_recs])
    out = []
    for qi, rec in enumerate(query_recs):
        junk = (g_ident == rec.identity) & (g_cam == rec.camera)
        valid = np.flatnonzero(~junk)
        if valid.size == 0:
            raise ValueError(f"query {rec.sample_id!r} has no valid gallery")
        ordered = valid[np.lexsort((valid, final[qi, valid]))]
        out.append(QueryRanking(qi, ordered, -final[qi, ordered]))
    return RankingList(tuple(out))
