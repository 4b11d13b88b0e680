"""Intra-camera and cross-camera anchor banks.

Each tracklet ``i`` of camera ``k`` owns an intra-camera anchor ``x[k][i]``
(moving average of its frame embeddings) and a cross-camera counterpart
``a[k][i]``.  The counterpart equals the intra anchor until a mutual rank-1
partner is found in another camera, at which point it becomes the midpoint of
the two normalised intra anchors.

Anchors are stored raw and only normalised where distances are taken.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyAnchorSet, EmptyTracklet
from .linalg import distances_to, l2_normalize, normalize_rows

UNMERGED = -1


@dataclass(frozen=True)
class CyclicMatch:
    query: tuple[int, int]
    peer: tuple[int, int]
    forward_distance: float
    backward_rank1: tuple[int, int]
    backward_distance: float

    @property
    def consistent(self) -> bool:
        return self.backward_rank1[1] == self.query[1]


@dataclass
class AnchorBank:
    """Per-camera anchor arrays.

    ``peer_camera[k][i] == -1`` marks an unmerged anchor; otherwise
    ``(peer_camera[k][i], peer_index[k][i])`` is the tracklet it was merged with.
    """

    intra: list[np.ndarray]
    cross: list[np.ndarray]
    peer_camera: list[np.ndarray]
    peer_index: list[np.ndarray]
    eta: float = 0.5
    _unit_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"update rate must lie in (0, 1], got {self.eta}")
        if not self.intra:
            raise EmptyAnchorSet("bank has no cameras")
        for k, (x, a) in enumerate(zip(self.intra, self.cross)):
            if x.shape != a.shape:
                raise DimensionMismatch(f"camera {k}: intra {x.shape} vs cross {a.shape}")

    @property
    def n_cameras(self) -> int:
        return len(self.intra)

    @property
    def sizes(self) -> list[int]:
        return [x.shape[0] for x in self.intra]

    @property
    def dim(self) -> int:
        return self.intra[0].shape[1]

    def is_merged(self, k: int, i: int) -> bool:
        return self.peer_camera[k][i] != UNMERGED

    def merge_state(self, k: int, i: int) -> tuple[int, int] | None:
        if not self.is_merged(k, i):
            return None
        return int(self.peer_camera[k][i]), int(self.peer_index[k][i])

    def merged_count(self) -> int:
        return int(sum(np.count_nonzero(pc != UNMERGED) for pc in self.peer_camera))

    def unit_intra(self, k: int) -> np.ndarray:
        if k not in self._unit_cache:
            self._unit_cache[k] = normalize_rows(self.intra[k])
        return self._unit_cache[k]

    def invalidate(self, k: int | None = None) -> None:
        if k is None:
            self._unit_cache.clear()
        else:
            self._unit_cache.pop(k, None)

    def copy(self) -> "AnchorBank":
        return AnchorBank(
            [x.copy() for x in self.intra],
            [a.copy() for a in self.cross],
            [p.copy() for p in self.peer_camera],
            [p.copy() for p in self.peer_index],
            self.eta,
        )

    def astype(self, dtype) -> "AnchorBank":
        return AnchorBank(
            [x.astype(dtype) for x in self.intra],
            [a.astype(dtype) for a in self.cross],
            [p.copy() for p in self.peer_camera],
            [p.copy() for p in self.peer_index],
            self.eta,
        )

    # -- Algorithm steps -------------------------------------------------

    def apply_ema(self, cameras: np.ndarray, tracklets: np.ndarray, embeddings: np.ndarray):
        """EMA-update the source anchor of every frame, sequentially in batch order.

        Returns the distinct (camera, tracklet) pairs touched, in order of first
        appearance.
        """
        touched: dict[tuple[int, int], None] = {}
        for k, i, f in zip(cameras, tracklets, embeddings):
            k, i = int(k), int(i)
            x = ema_update(self.intra[k][i], f, self.eta)
            self.intra[k][i] = x
            if not self.is_merged(k, i):
                self.cross[k][i] = x
            touched[(k, i)] = None
            self.invalidate(k)
        return list(touched)

    def refresh_cross(self, queries: Sequence[tuple[int, int]]) -> list[CyclicMatch | None]:
        """Cyclic-rank each query against every other camera and update its cross anchor.

        With more than two cameras the consistent match with the smallest
        forward distance wins.  Returns the chosen match (or ``None``) per query.
        """
        chosen = []
        for k, i in queries:
            best = None
            for l in range(self.n_cameras):
                if l == k or self.sizes[l] == 0:
                    continue
                m = cyclic_rank((k, i), self, l)
                if m.consistent and (best is None or m.forward_distance < best.forward_distance):
                    best = m
            update_cross_anchor(self, (k, i), best)
            chosen.append(best)
        return chosen


def init_anchor_bank(tracklets: Sequence[Sequence[np.ndarray]], eta: float = 0.5) -> AnchorBank:
    """Build a bank from per-camera, per-tracklet frame embeddings.

    ``tracklets[k][i]`` is an ``(n_frames, d)`` array; each intra anchor starts
    as the mean of its frames.
    """
    intra = []
    dim = None
    for k, cam in enumerate(tracklets):
        rows = []
        for i, frames in enumerate(cam):
            frames = np.atleast_2d(np.asarray(frames))
            if frames.shape[0] == 0 or frames.size == 0:
                raise EmptyTracklet(f"camera {k} tracklet {i} has no frames")
            if dim is None:
                dim = frames.shape[1]
            elif frames.shape[1] != dim:
                raise DimensionMismatch(f"camera {k} tracklet {i}: dim {frames.shape[1]} != {dim}")
            rows.append(frames.sum(axis=0) / frames.shape[0])
        intra.append(np.array(rows).reshape(len(rows), dim if dim is not None else 0))
    return _fresh_bank(intra, eta)


def bank_from_frames(
    embeddings: np.ndarray,
    cameras: np.ndarray,
    tracklets: np.ndarray,
    sizes: Sequence[int],
    eta: float = 0.5,
) -> AnchorBank:
    """Vectorised :func:`init_anchor_bank` over a flat frame table."""
    d = embeddings.shape[1]
    intra = []
    for k, n_k in enumerate(sizes):
        sel = cameras == k
        sums = np.zeros((n_k, d), dtype=embeddings.dtype)
        np.add.at(sums, tracklets[sel], embeddings[sel])
        counts = np.bincount(tracklets[sel], minlength=n_k)
        if np.any(counts == 0):
            raise EmptyTracklet(f"camera {k} tracklets {np.flatnonzero(counts == 0).tolist()} have no frames")
        intra.append(sums / counts[:, None].astype(embeddings.dtype))
    return _fresh_bank(intra, eta)


def _fresh_bank(intra: list[np.ndarray], eta: float) -> AnchorBank:
    for x in intra:
        normalize_rows(x)  # every anchor must be normalisable
    return AnchorBank(
        intra,
        [x.copy() for x in intra],
        [np.full(x.shape[0], UNMERGED, dtype=np.int64) for x in intra],
        [np.full(x.shape[0], UNMERGED, dtype=np.int64) for x in intra],
        eta,
    )


def ema_update(x, f, eta: float) -> np.ndarray:
    """One moving-average step ``x - eta * (l2(x) - l2(f))``."""
    x = np.asarray(x)
    return x - eta * (l2_normalize(x) - l2_normalize(np.asarray(f, dtype=x.dtype)))


def cyclic_rank(query: tuple[int, int], bank: AnchorBank, peer_camera: int) -> CyclicMatch:
    k, p = query
    l = peer_camera
    if k == l:
        raise ValueError("cyclic ranking needs two distinct cameras")
    if bank.sizes[k] == 0 or bank.sizes[l] == 0:
        raise EmptyAnchorSet(f"camera {k if bank.sizes[k] == 0 else l} has no anchors")
    unit_k = bank.unit_intra(k)
    unit_l = bank.unit_intra(l)
    fwd = distances_to(unit_k[p], unit_l)
    t = int(np.argmin(fwd))
    back = distances_to(unit_l[t], unit_k)
    j = int(np.argmin(back))
    return CyclicMatch((k, p), (l, t), float(fwd[t]), (k, j), float(back[j]))


def update_cross_anchor(bank: AnchorBank, query: tuple[int, int], match: CyclicMatch | None) -> None:
    """Merge with the peer on a consistent match, otherwise revert to the intra anchor."""
    k, i = query
    if match is not None and match.query != query:
        raise ValueError(f"match is for {match.query}, not {query}")
    if match is None or not match.consistent:
        bank.cross[k][i] = bank.intra[k][i]
        bank.peer_camera[k][i] = UNMERGED
        bank.peer_index[k][i] = UNMERGED
        return
    l, t = match.peer
    bank.cross[k][i] = 0.5 * (bank.unit_intra(k)[i] + bank.unit_intra(l)[t])
    bank.peer_camera[k][i] = l
    bank.peer_index[k][i] = t
