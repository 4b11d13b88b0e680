"""Frame tables, file formats, synthetic data, batch sampling and checkpoints.

Feature file (little-endian)::

    b"DALF" | u32 version=1 | u64 rows | u32 dim | rows*dim float32, row-major

Manifest: UTF-8 CSV, header ``frame_id,tracklet_index,camera_id[,identity_id]``,
one row per feature row in the same order.

Checkpoint (little-endian)::

    b"DALC" | u32 version=1 | u64 iteration | u32 n_sections
    then per section: u16 name_len | name | u64 payload_len | payload

with sections ``meta``, ``head``, ``optim``, ``anchors`` and optionally ``rng``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .anchors import AnchorBank
from .errors import (
    BadMagic,
    BadManifest,
    ConfigError,
    DanglingManifestRow,
    EmptyDataset,
    NonFiniteFeature,
    RowCountMismatch,
    SingleCamera,
    TruncatedFile,
    VersionMismatch,
)
from .model import EmbeddingHead, LRSchedule, OptimizerState

FEATURE_MAGIC = b"DALF"
CHECKPOINT_MAGIC = b"DALC"
FORMAT_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIQI")


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    tracklet_index: int
    camera_id: int
    feature: np.ndarray
    identity_id: int | None = None


@dataclass(frozen=True)
class FrameTable:
    """What training may see: features and tracklet membership, no identities.

    ``cameras`` holds dense camera indices ``0..n_cameras-1``.
    """

    features: np.ndarray
    cameras: np.ndarray
    tracklets: np.ndarray
    sizes: tuple[int, ...]

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_cameras(self) -> int:
        return len(self.sizes)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def require_cross_camera(self) -> None:
        if self.n_cameras < 2:
            raise SingleCamera(f"training needs at least 2 cameras, dataset has {self.n_cameras}")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # float32, (n, d_in)
    frame_ids: np.ndarray
    cameras: np.ndarray  # dense camera index per frame
    tracklets: np.ndarray
    camera_ids: tuple[int, ...]  # original id of each dense camera index
    identities: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_cameras(self) -> int:
        return len(self.camera_ids)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(self.tracklets[self.cameras == k].max()) + 1 for k in range(self.n_cameras))

    @property
    def has_labels(self) -> bool:
        return self.identities is not None

    def frames(self) -> Iterator[FrameRecord]:
        for r in range(self.n_frames):
            yield FrameRecord(
                int(self.frame_ids[r]),
                int(self.tracklets[r]),
                self.camera_ids[self.cameras[r]],
                self.features[r],
                None if self.identities is None else int(self.identities[r]),
            )

    def unlabelled(self) -> FrameTable:
        return FrameTable(self.features, self.cameras, self.tracklets, self.sizes)

    def tracklet_identities(self) -> list[np.ndarray]:
        """Identity label of every tracklet, per camera (evaluation only)."""
        if self.identities is None:
            raise BadManifest("dataset carries no identity labels")
        out = []
        for k, n_k in enumerate(self.sizes):
            sel = self.cameras == k
            ids = np.full(n_k, -1, dtype=np.int64)
            ids[self.tracklets[sel]] = self.identities[sel]
            check = ids[self.tracklets[sel]] != self.identities[sel]
            if np.any(check):
                raise BadManifest(f"camera {self.camera_ids[k]}: a tracklet mixes identities")
            out.append(ids)
        return out


def build_dataset(features, frame_ids, camera_ids, tracklets, identities=None) -> Dataset:
    """Validate raw columns and map camera ids to dense indices."""
    features = np.asarray(features)
    n = features.shape[0]
    if n == 0:
        raise EmptyDataset("dataset has no frames")
    cols = [np.asarray(c, dtype=np.int64) for c in (frame_ids, camera_ids, tracklets)]
    if any(c.shape != (n,) for c in cols):
        raise RowCountMismatch("column lengths differ from feature rows")
    frame_ids, raw_cams, tracklets = cols
    bad = np.flatnonzero(~np.all(np.isfinite(features), axis=1))
    if bad.size:
        raise NonFiniteFeature(f"non-finite feature at row {int(bad[0])}")
    uniq = np.unique(raw_cams)
    cameras = np.searchsorted(uniq, raw_cams)
    for k, cid in enumerate(uniq):
        trk = tracklets[cameras == k]
        present = np.unique(trk)
        if present[0] < 0 or present.size != present[-1] + 1:
            raise BadManifest(f"camera {int(cid)}: tracklet indices are not dense 0..N-1")
    if identities is not None:
        identities = np.asarray(identities, dtype=np.int64)
    return Dataset(features, frame_ids, cameras, tracklets, tuple(int(c) for c in uniq), identities)


# -- feature + manifest files ----------------------------------------------


def save_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    rows, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, rows, dim))
        fh.write(features.tobytes(order="C"))


def read_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise BadMagic(f"{path}: bad magic at byte offset 0: {blob[:4]!r}")
    if len(blob) < _FEATURE_HEADER.size:
        raise TruncatedFile(f"{path}: header truncated at byte offset {len(blob)}")
    _, version, rows, dim = _FEATURE_HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: version {version} at byte offset 4, expected {FORMAT_VERSION}")
    payload = len(blob) - _FEATURE_HEADER.size
    if payload != rows * dim * 4:
        raise RowCountMismatch(
            f"{path}: header declares {rows} rows x {dim} (byte offset 8) but payload holds {payload} bytes"
        )
    feats = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(rows, dim)
    bad = np.flatnonzero(~np.isfinite(feats).all(axis=1)) if rows else np.zeros(0, int)
    if bad.size:
        r = int(bad[0])
        c = int(np.flatnonzero(~np.isfinite(feats[r]))[0])
        raise NonFiniteFeature(f"{path}: non-finite value at row {r} (byte offset {_FEATURE_HEADER.size + 4 * (r * dim + c)})")
    return feats.astype(np.float32)


def save_manifest(path, dataset: Dataset) -> None:
    header = ["frame_id", "tracklet_index", "camera_id"]
    if dataset.has_labels:
        header.append("identity_id")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(dataset.n_frames):
            row = [int(dataset.frame_ids[r]), int(dataset.tracklets[r]), dataset.camera_ids[dataset.cameras[r]]]
            if dataset.has_labels:
                row.append(int(dataset.identities[r]))
            w.writerow(row)


def read_manifest(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDataset(f"{path}: manifest is empty")
        header = [h.strip() for h in header]
        if header not in (
            ["frame_id", "tracklet_index", "camera_id"],
            ["frame_id", "tracklet_index", "camera_id", "identity_id"],
        ):
            raise BadManifest(f"{path}: unexpected header {header}")
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise BadManifest(f"{path}: line {lineno} has {len(row)} fields, expected {width}")
            try:
                rows.append([int(v) for v in row])
            except ValueError:
                raise BadManifest(f"{path}: line {lineno} has a non-integer field") from None
    if not rows:
        raise EmptyDataset(f"{path}: manifest has no rows")
    table = np.array(rows, dtype=np.int64)
    ident = table[:, 3] if width == 4 else None
    return table[:, 0], table[:, 1], table[:, 2], ident


def load_features(feature_path, manifest_path) -> Dataset:
    feats = read_features(feature_path)
    frame_ids, tracklets, cams, ident = read_manifest(manifest_path)
    if len(frame_ids) > feats.shape[0]:
        raise DanglingManifestRow(
            f"{manifest_path}: manifest row {feats.shape[0]} has no feature row ({feats.shape[0]} features)"
        )
    if len(frame_ids) < feats.shape[0]:
        raise RowCountMismatch(f"{manifest_path}: {len(frame_ids)} manifest rows for {feats.shape[0]} feature rows")
    return build_dataset(feats, frame_ids, cams, tracklets, ident)


def save_dataset(dataset: Dataset, feature_path, manifest_path) -> None:
    save_features(feature_path, dataset.features)
    save_manifest(manifest_path, dataset)


# -- synthetic data --------------------------------------------------------


@dataclass
class SyntheticConfig:
    identities: int = 50
    cameras: int = 2
    frames_per_tracklet: tuple[int, int] = (8, 16)
    base_dim: int = 32
    distortion: float = 0.5
    noise: float = 0.1
    identity_separation: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.identities < 2:
            raise ConfigError(f"identities must be >= 2, got {self.identities}")
        if self.cameras < 2:
            raise ConfigError(f"cameras must be >= 2, got {self.cameras}")
        lo, hi = self.frames_per_tracklet
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad frames_per_tracklet range {self.frames_per_tracklet}")
        if self.base_dim < 2:
            raise ConfigError("base_dim must be >= 2")
        if self.noise < 0 or self.distortion < 0:
            raise ConfigError("noise and distortion scales must be non-negative")
        if not 0 <= self.identity_separation < math.pi:
            raise ConfigError("identity_separation is an angle in [0, pi)")


@dataclass
class SyntheticTruth:
    prototypes: np.ndarray
    transforms: list[np.ndarray]
    dataset: Dataset = field(repr=False)


def _separated_prototypes(rng, n: int, d: int, min_angle: float, max_tries: int = 200) -> np.ndarray:
    cos_max = math.cos(min_angle)
    protos: list[np.ndarray] = []
    tries = 0
    while len(protos) < n:
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if all(np.dot(v, p) <= cos_max for p in protos):
            protos.append(v)
            tries = 0
        else:
            tries += 1
            if tries > max_tries:
                raise ConfigError(f"could not place {n} prototypes {min_angle:.3f} rad apart in {d} dims")
    return np.array(protos)


def min_pairwise_angle(vectors: np.ndarray) -> float:
    u = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    best = math.pi
    for i in range(len(u)):
        for j in range(i + 1, len(u)):
            best = min(best, math.acos(max(-1.0, min(1.0, float(np.dot(u[i], u[j]))))))
    return best


def generate_synthetic_truth(config: SyntheticConfig) -> SyntheticTruth:
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.base_dim
    protos = _separated_prototypes(rng, config.identities, d, config.identity_separation)
    transforms = [np.eye(d) + config.distortion * rng.standard_normal((d, d)) / math.sqrt(d) for _ in range(config.cameras)]
    lo, hi = config.frames_per_tracklet
    feats, cams, trks, ids = [], [], [], []
    for k in range(config.cameras):
        order = rng.permutation(config.identities)  # tracklet index -> identity
        for i, ident in enumerate(order):
            n = int(rng.integers(lo, hi + 1))
            clean = transforms[k] @ protos[ident]
            frames = clean + config.noise * rng.standard_normal((n, d))
            feats.append(frames)
            cams += [k] * n
            trks += [i] * n
            ids += [int(ident)] * n
    features = np.concatenate(feats).astype(np.float32)
    ds = build_dataset(features, np.arange(len(cams)), cams, trks, ids)
    return SyntheticTruth(protos, transforms, ds)


def generate_synthetic(config: SyntheticConfig, out_dir=None) -> Dataset:
    """Generate a labelled multi-camera dataset; optionally write it to ``out_dir``."""
    ds = generate_synthetic_truth(config).dataset
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, out / "features.dalf", out / "manifest.csv")
    return ds


# -- sampling --------------------------------------------------------------


def sample_batch(rng: np.random.Generator, table: FrameTable | Dataset, batch_size: int = 64, balanced: bool = False) -> np.ndarray:
    """Row indices of one mini-batch.

    Uniform over frames without replacement (with replacement once the batch
    exceeds the dataset).  ``balanced`` first draws tracklets uniformly, then
    one frame of each.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    n = table.n_frames
    if n == 0:
        raise EmptyDataset("cannot sample from an empty dataset")
    if not balanced:
        return rng.choice(n, size=batch_size, replace=batch_size > n)
    keys = table.cameras.astype(np.int64) * (int(table.tracklets.max()) + 1) + table.tracklets
    uniq, inverse = np.unique(keys, return_inverse=True)
    picks = rng.integers(0, uniq.size, size=batch_size)
    out = np.empty(batch_size, dtype=np.int64)
    for b, g in enumerate(picks):
        members = np.flatnonzero(inverse == g)
        out[b] = members[rng.integers(0, members.size)]
    return out


# -- checkpoints -----------------------------------------------------------

_HEAD_CODES = {"identity": 0, "linear": 1, "onehidden": 2}
_DTYPES = {"float64": 0, "float32": 1}


@dataclass
class Checkpoint:
    iteration: int
    head: EmbeddingHead
    optimizer: OptimizerState
    bank: AnchorBank
    precision: str = "float64"
    rng_state: dict | None = None


class _Reader:
    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFile(f"{self.what}: truncated at byte offset {len(self.blob)} (needed {self.pos + n})")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        vals = s.unpack(self.take(s.size))
        return vals if len(vals) > 1 else vals[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def _pack_head(head: EmbeddingHead) -> bytes:
    p = np.ascontiguousarray(head.params, dtype="<f8")
    return struct.pack("<BIIIQ", _HEAD_CODES[head.kind], head.d_in, head.d_out, head.hidden, p.size) + p.tobytes()


def _pack_optim(opt: OptimizerState) -> bytes:
    s = opt.schedule
    out = struct.pack("<ddQI", s.initial, s.decay_factor, s.decay_interval, len(s.milestones))
    out += np.asarray(s.milestones, dtype="<u8").tobytes()
    v = np.ascontiguousarray(opt.velocity, dtype="<f8")
    out += struct.pack("<dQQ", opt.momentum, opt.t, v.size) + v.tobytes()
    return out


def _pack_anchors(bank: AnchorBank) -> bytes:
    out = struct.pack("<dI", bank.eta, bank.n_cameras)
    for k in range(bank.n_cameras):
        n, d = bank.intra[k].shape
        out += struct.pack("<QI", n, d)
        out += np.ascontiguousarray(bank.intra[k], dtype="<f8").tobytes()
        out += np.ascontiguousarray(bank.cross[k], dtype="<f8").tobytes()
        out += np.ascontiguousarray(bank.peer_camera[k], dtype="<i8").tobytes()
        out += np.ascontiguousarray(bank.peer_index[k], dtype="<i8").tobytes()
    return out


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    sections = [
        ("meta", struct.pack("<B", _DTYPES[ck.precision])),
        ("head", _pack_head(ck.head)),
        ("optim", _pack_optim(ck.optimizer)),
        ("anchors", _pack_anchors(ck.bank)),
    ]
    if ck.rng_state is not None:
        sections.append(("rng", json.dumps(ck.rng_state, sort_keys=True).encode("utf-8")))
    buf = io.BytesIO()
    buf.write(struct.pack("<4sIQI", CHECKPOINT_MAGIC, FORMAT_VERSION, ck.iteration, len(sections)))
    for name, payload in sections:
        raw = name.encode("ascii")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload)
    return buf.getvalue()


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    os.replace(tmp, path)


def parse_checkpoint(blob: bytes, what: str = "checkpoint") -> Checkpoint:
    r = _Reader(blob, what)
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{what}: bad magic at byte offset 0: {blob[:4]!r}")
    _, version, iteration, n_sections = r.unpack("4sIQI")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{what}: version {version} at byte offset 4, expected {FORMAT_VERSION}")
    sections = {}
    for _ in range(n_sections):
        name = r.take(r.unpack("H")).decode("ascii")
        sections[name] = r.take(r.unpack("Q"))
    if r.pos != len(blob):
        raise TruncatedFile(f"{what}: {len(blob) - r.pos} trailing bytes at byte offset {r.pos}")
    for required in ("meta", "head", "optim", "anchors"):
        if required not in sections:
            raise TruncatedFile(f"{what}: missing section {required!r}")

    precision = {v: k for k, v in _DTYPES.items()}[_Reader(sections["meta"], what).unpack("B")]

    h = _Reader(sections["head"], what + "/head")
    code, d_in, d_out, hidden, n = h.unpack("BIIIQ")
    kind = {v: k for k, v in _HEAD_CODES.items()}[code]
    head = EmbeddingHead(kind, d_in, d_out, hidden, h.array("<f8", n).astype(precision))

    o = _Reader(sections["optim"], what + "/optim")
    initial, factor, interval, n_m = o.unpack("ddQI")
    milestones = tuple(int(m) for m in o.array("<u8", n_m))
    momentum, t, n_v = o.unpack("dQQ")
    velocity = o.array("<f8", n_v).astype(precision)
    opt = OptimizerState(LRSchedule(initial, factor, interval, milestones), momentum, velocity, t)

    a = _Reader(sections["anchors"], what + "/anchors")
    eta, n_cams = a.unpack("dI")
    intra, cross, pc, pi = [], [], [], []
    for _ in range(n_cams):
        n_k, d = a.unpack("QI")
        intra.append(a.array("<f8", n_k * d).reshape(n_k, d).astype(precision))
        cross.append(a.array("<f8", n_k * d).reshape(n_k, d).astype(precision))
        pc.append(a.array("<i8", n_k).astype(np.int64))
        pi.append(a.array("<i8", n_k).astype(np.int64))
    bank = AnchorBank(intra, cross, pc, pi, eta)

    rng_state = json.loads(sections["rng"].decode("utf-8")) if "rng" in sections else None
    return Checkpoint(int(iteration), head, opt, bank, precision, rng_state)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


