"""Tracklet pooling, CMC / mAP, and association-dynamics metrics.

Everything here runs in float64.  Ranking ties resolve to the lowest gallery
index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import UNMERGED, AnchorBank
from .errors import NoMergedAnchors, QueryWithoutGalleryMatch
from .linalg import distance_matrix, l2_normalize, normalize_rows


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    association_rate: float
    true_match_rate: float | None
    iteration: int

    def rank(self, r: int) -> float:
        """CMC at rank ``r`` (1-based), saturating past the gallery size."""
        return float(self.cmc[min(r, len(self.cmc)) - 1])


def tracklet_representation(frame_embeddings) -> np.ndarray:
    frames = np.atleast_2d(np.asarray(frame_embeddings, dtype=np.float64))
    if frames.shape[0] == 0:
        raise ValueError("tracklet has no frames")
    return l2_normalize(frames.max(axis=0))


def pool_tracklets(embeddings: np.ndarray, cameras: np.ndarray, tracklets: np.ndarray, sizes) -> list[np.ndarray]:
    """Max-pool + normalise every tracklet; returns one ``(N_k, d)`` array per camera."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    out = []
    for k, n_k in enumerate(sizes):
        sel = cameras == k
        pooled = np.full((n_k, embeddings.shape[1]), -np.inf)
        np.maximum.at(pooled, tracklets[sel], embeddings[sel])
        out.append(normalize_rows(pooled))
    return out


def _ranked_matches(query, query_ids, gallery, gallery_ids):
    query = normalize_rows(np.asarray(query, dtype=np.float64))
    gallery = normalize_rows(np.asarray(gallery, dtype=np.float64))
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    D = distance_matrix(query, gallery)
    order = np.argsort(D, axis=1, kind="stable")
    matches = gallery_ids[order] == query_ids[:, None]
    missing = np.flatnonzero(~matches.any(axis=1))
    if missing.size:
        raise QueryWithoutGalleryMatch(f"queries {missing[:10].tolist()} have no correct gallery item")
    return matches


def cmc_curve(query, query_ids, gallery, gallery_ids) -> np.ndarray:
    matches = _ranked_matches(query, query_ids, gallery, gallery_ids)
    first = matches.argmax(axis=1)
    hits = np.zeros(matches.shape[1])
    np.add.at(hits, first, 1.0)
    return np.cumsum(hits) / matches.shape[0]


def average_precision(match_row: np.ndarray) -> float:
    """AP of one ranked boolean relevance row."""
    ranks = np.flatnonzero(match_row) + 1
    precision = np.arange(1, ranks.size + 1) / ranks
    return float(precision.mean())


def mean_average_precision(query, query_ids, gallery, gallery_ids) -> float:
    matches = _ranked_matches(query, query_ids, gallery, gallery_ids)
    return float(np.mean([average_precision(row) for row in matches]))


def cross_camera_splits(reps: list[np.ndarray], ids: list[np.ndarray]):
    """Yield ``(query, query_ids, gallery, gallery_ids)`` per query camera.

    Two cameras: camera 0 queries camera 1.  More: each camera queries the
    union of all other cameras.  Queries whose identity is absent from the
    gallery are dropped.
    """
    n = len(reps)
    query_cams = [0] if n == 2 else list(range(n))
    for k in query_cams:
        others = [l for l in range(n) if l != k]
        gallery = np.concatenate([reps[l] for l in others])
        gallery_ids = np.concatenate([ids[l] for l in others])
        keep = np.isin(ids[k], gallery_ids)
        yield reps[k][keep], ids[k][keep], gallery, gallery_ids


def evaluate_reps(reps: list[np.ndarray], ids: list[np.ndarray]) -> tuple[np.ndarray, float]:
    """Query-weighted CMC and mAP over :func:`cross_camera_splits`."""
    cmcs, aps, counts = [], [], []
    for q, qi, g, gi in cross_camera_splits(reps, ids):
        if len(qi) == 0:
            continue
        matches = _ranked_matches(q, qi, g, gi)
        first = matches.argmax(axis=1)
        hits = np.zeros(matches.shape[1])
        np.add.at(hits, first, 1.0)
        cmcs.append(np.cumsum(hits))
        aps.extend(average_precision(row) for row in matches)
        counts.append(len(qi))
    if not counts:
        raise QueryWithoutGalleryMatch("no query has a match in any gallery")
    width = max(len(c) for c in cmcs)
    total = np.zeros(width)
    for c in cmcs:
        total += np.pad(c, (0, width - len(c)), mode="edge")
    return total / sum(counts), float(np.mean(aps))


def association_rate(bank: AnchorBank) -> float:
    total = sum(bank.sizes)
    if total == 0:
        raise ValueError("bank is empty")
    return bank.merged_count() / total


def true_match_rate(bank: AnchorBank, tracklet_ids: list[np.ndarray]) -> float:
    """Fraction of merged anchors whose peer shares their identity."""
    merged = correct = 0
    for k in range(bank.n_cameras):
        pc = bank.peer_camera[k]
        for i in np.flatnonzero(pc != UNMERGED):
            merged += 1
            correct += int(tracklet_ids[k][i] == tracklet_ids[int(pc[i])][int(bank.peer_index[k][i])])
    if merged == 0:
        raise NoMergedAnchors("no merged anchors; true-match rate is undefined")
    return correct / merged


def true_match_rate_or_none(bank: AnchorBank, tracklet_ids) -> float | None:
    try:
        return true_match_rate(bank, tracklet_ids)
    except NoMergedAnchors:
        return None
