"""Normalisation, pairwise distances and ranking primitives.

All distances are Euclidean distances between l2-normalised vectors, so they
live in ``[0, 2]``. Differences are formed explicitly (never through the
``|u|^2 + |v|^2 - 2 u.v`` expansion) which keeps small distances accurate and
the summation order fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyAnchorSet, ZeroVector

ZERO_NORM = 1e-12


@dataclass(frozen=True)
class DistanceRanking:
    distances: np.ndarray
    order: np.ndarray
    rank1_index: int
    rank1_distance: float


def _check_finite(a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite entries in vector")


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    _check_finite(v)
    norm = np.sqrt(np.dot(v, v))
    if norm < ZERO_NORM:
        raise ZeroVector(f"cannot normalise vector with norm {float(norm):.3g}")
    return v / norm


def normalize_rows(m) -> np.ndarray:
    """Row-wise :func:`l2_normalize` for a 2-d array."""
    m = np.asarray(m)
    if not np.issubdtype(m.dtype, np.floating):
        m = m.astype(np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d array, got shape {m.shape}")
    _check_finite(m)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroVector(f"rows {bad.tolist()} have (near) zero norm")
    return m / norms[:, None]


def pair_distance(u, v) -> float:
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise DimensionMismatch(f"{u.shape} vs {v.shape}")
    diff = l2_normalize(u) - l2_normalize(v)
    return float(np.sqrt(np.dot(diff, diff)))


def distances_to(f_unit: np.ndarray, anchors_unit: np.ndarray) -> np.ndarray:
    """Distances from one unit vector to each row of a unit-row matrix."""
    diff = anchors_unit - f_unit
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def distance_matrix(a_unit: np.ndarray, b_unit: np.ndarray) -> np.ndarray:
    """All-pairs distances between rows of two unit-row matrices."""
    diff = a_unit[:, None, :] - b_unit[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def distance_row(f, anchors) -> DistanceRanking:
    """Rank all ``anchors`` by distance to ``f``.

    Ties resolve to the lowest anchor index (stable sort).
    """
    anchors = np.asarray(anchors)
    f = np.asarray(f)
    if anchors.ndim != 2 or anchors.shape[0] == 0:
        raise EmptyAnchorSet("anchor set is empty")
    if f.ndim != 1 or anchors.shape[1] != f.shape[0]:
        raise DimensionMismatch(f"frame dim {f.shape} vs anchors {anchors.shape}")
    dist = distances_to(l2_normalize(f), normalize_rows(anchors))
    order = np.argsort(dist, kind="stable")
    top = int(order[0])
    return DistanceRanking(dist, order, top, float(dist[top]))
