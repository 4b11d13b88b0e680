"""Top-push margin association losses and their gradients.

For a frame ``f`` from tracklet ``p`` of camera ``k`` let ``D_pi`` be its
distance to the intra anchors of camera ``k`` and ``t`` the rank-1 anchor.

    intra:  [D_pp - D_pt + m]_+          if t != p
            [D_pp - mean_rank1_k + m]_+   if t == p
    cross:  same, with D_pp replaced by the distance to the cross anchor a_kp

``mean_rank1_k`` averages the rank-1 distance over the batch frames from
camera ``k``.  Anchors, the rank-1 choice and ``mean_rank1_k`` are constants
for differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .anchors import AnchorBank
from .linalg import DistanceRanking, distance_matrix, normalize_rows

DEFAULT_MARGIN = 0.2
DEFAULT_TRADEOFF = 1.0


@dataclass(frozen=True)
class BatchCameraStats:
    camera: int
    count: int
    mean_rank1: float


@dataclass
class LossBreakdown:
    loss_I: float
    loss_C: float
    loss_total: float
    margin: float
    tradeoff: float
    intra_weight: float
    # per-frame audit columns
    d_source: np.ndarray
    d_rank1: np.ndarray
    d_cross: np.ndarray
    rank1_index: np.ndarray
    source_is_rank1: np.ndarray
    mean_rank1: np.ndarray
    rank_gap: np.ndarray
    intra_terms: np.ndarray
    cross_terms: np.ndarray
    camera_stats: list[BatchCameraStats]

    @property
    def batch_size(self) -> int:
        return int(self.intra_terms.shape[0])

    def boundary_distance(self) -> float:
        """Smallest distance of any frame to a branch switch or hinge kink."""
        competitor = np.where(self.source_is_rank1, self.mean_rank1, self.d_rank1)
        pre_i = self.d_source - competitor + self.margin
        pre_c = self.d_cross - competitor + self.margin
        return float(min(np.abs(pre_i).min(), np.abs(pre_c).min(), self.rank_gap.min()))


def batch_mean_rank1(rankings: Mapping[int, Sequence[DistanceRanking]]) -> list[BatchCameraStats]:
    stats = []
    for k in sorted(rankings):
        group = rankings[k]
        if not group:
            continue
        d = np.array([r.rank1_distance for r in group], dtype=np.float64)
        stats.append(BatchCameraStats(k, len(group), float(d.sum() / len(group))))
    return stats


def _hinge(x):
    return np.maximum(x, 0.0)


def intra_loss(ranking: DistanceRanking, source: int, mean_rank1: float, margin: float = DEFAULT_MARGIN) -> float:
    d_pp = ranking.distances[source]
    if ranking.rank1_index != source:
        return float(_hinge(d_pp - ranking.rank1_distance + margin))
    return float(_hinge(d_pp - mean_rank1 + margin))


def cross_loss(
    d_cross: float,
    ranking: DistanceRanking,
    source: int,
    mean_rank1: float,
    margin: float = DEFAULT_MARGIN,
) -> float:
    # the competitor distance always comes from the intra-anchor ranking
    if ranking.rank1_index != source:
        return float(_hinge(d_cross - ranking.rank1_distance + margin))
    return float(_hinge(d_cross - mean_rank1 + margin))


def total_loss(loss_I: float, loss_C: float, tradeoff: float = DEFAULT_TRADEOFF) -> float:
    if tradeoff < 0:
        raise ValueError("tradeoff must be non-negative")
    return loss_I + tradeoff * loss_C


def association_losses(
    embeddings: np.ndarray,
    cameras: np.ndarray,
    tracklets: np.ndarray,
    bank: AnchorBank,
    margin: float = DEFAULT_MARGIN,
    tradeoff: float = DEFAULT_TRADEOFF,
    intra_weight: float = 1.0,
    frozen_mean_rank1: Mapping[int, float] | None = None,
) -> LossBreakdown:
    """Batch losses (means of per-frame hinge terms).

    ``loss_total = intra_weight * loss_I + tradeoff * loss_C``; ``intra_weight``
    is 1 except in the cross-only ablation.  ``frozen_mean_rank1`` overrides the
    per-camera batch mean, which gradient checks need to hold it constant.
    """
    embeddings = np.asarray(embeddings)
    cameras = np.asarray(cameras)
    tracklets = np.asarray(tracklets)
    B = embeddings.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    units = normalize_rows(embeddings)
    dtype = units.dtype

    d_source = np.empty(B, dtype)
    d_rank1 = np.empty(B, dtype)
    d_cross = np.empty(B, dtype)
    rank1 = np.empty(B, np.int64)
    mean_r1 = np.empty(B, dtype)
    gap = np.full(B, np.inf, dtype)
    stats = []
    for k in np.unique(cameras):
        k = int(k)
        sel = np.flatnonzero(cameras == k)
        src = tracklets[sel]
        D = distance_matrix(units[sel], bank.unit_intra(k))
        t = np.argmin(D, axis=1)
        rows = np.arange(sel.size)
        d_source[sel] = D[rows, src]
        d_rank1[sel] = D[rows, t]
        rank1[sel] = t
        if D.shape[1] > 1:
            two = np.partition(D, 1, axis=1)
            gap[sel] = two[:, 1] - two[:, 0]
        cross_unit = normalize_rows(bank.cross[k][src].astype(dtype, copy=False))
        diff = units[sel] - cross_unit
        d_cross[sel] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        m = float(d_rank1[sel].sum() / sel.size)
        stats.append(BatchCameraStats(k, int(sel.size), m))
        if frozen_mean_rank1 is not None:
            m = frozen_mean_rank1[k]
        mean_r1[sel] = m

    top = rank1 == tracklets
    competitor = np.where(top, mean_r1, d_rank1)
    intra_terms = _hinge(d_source - competitor + margin)
    cross_terms = _hinge(d_cross - competitor + margin)
    loss_I = float(intra_terms.sum() / B)
    loss_C = float(cross_terms.sum() / B)
    return LossBreakdown(
        loss_I=loss_I,
        loss_C=loss_C,
        loss_total=intra_weight * loss_I + tradeoff * loss_C,
        margin=margin,
        tradeoff=tradeoff,
        intra_weight=intra_weight,
        d_source=d_source,
        d_rank1=d_rank1,
        d_cross=d_cross,
        rank1_index=rank1,
        source_is_rank1=top,
        mean_rank1=mean_r1,
        rank_gap=gap,
        intra_terms=intra_terms,
        cross_terms=cross_terms,
        camera_stats=stats,
    )


def _distance_grad(f: np.ndarray, u: np.ndarray, y_unit: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Row-wise gradient of ``|l2(f) - y|`` w.r.t. raw ``f`` (zero where d == 0)."""
    norm_f = np.sqrt(np.einsum("ij,ij->i", f, f))
    proj = np.einsum("ij,ij->i", u, y_unit)
    num = -y_unit + proj[:, None] * u
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(d > 0, 1.0 / (norm_f * d), 0.0)
    return num * scale[:, None]


def loss_gradient(
    embeddings: np.ndarray,
    cameras: np.ndarray,
    tracklets: np.ndarray,
    bank: AnchorBank,
    losses: LossBreakdown,
) -> np.ndarray:
    """Gradient of ``losses.loss_total`` w.r.t. each raw frame embedding.

    ``losses`` must come from :func:`association_losses` on the same inputs and
    the same (frozen) bank.  Inactive hinges contribute nothing.
    """
    f = np.asarray(embeddings)
    cameras = np.asarray(cameras)
    tracklets = np.asarray(tracklets)
    B = f.shape[0]
    u = normalize_rows(f)
    dtype = u.dtype
    src_unit = np.empty_like(u)
    top_unit = np.empty_like(u)
    cross_unit = np.empty_like(u)
    for k in np.unique(cameras):
        k = int(k)
        sel = np.flatnonzero(cameras == k)
        unit_k = bank.unit_intra(k).astype(dtype, copy=False)
        src_unit[sel] = unit_k[tracklets[sel]]
        top_unit[sel] = unit_k[losses.rank1_index[sel]]
        cross_unit[sel] = normalize_rows(bank.cross[k][tracklets[sel]].astype(dtype, copy=False))

    g_src = _distance_grad(f, u, src_unit, losses.d_source)
    g_cross = _distance_grad(f, u, cross_unit, losses.d_cross)
    # competitor gradient only exists on the t != p branch
    g_top = _distance_grad(f, u, top_unit, losses.d_rank1)
    g_top[losses.source_is_rank1] = 0.0

    w_I = losses.intra_weight * (losses.intra_terms > 0)
    w_C = losses.tradeoff * (losses.cross_terms > 0)
    grad = w_I[:, None] * (g_src - g_top) + w_C[:, None] * (g_cross - g_top)
    return (grad / B).astype(dtype, copy=False)
