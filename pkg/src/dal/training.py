"""The unsupervised association training loop.

One iteration: sample frames, embed them, rank against the intra anchors,
compute both association losses and their gradient (anchors frozen), update
the touched intra anchors by EMA, refresh their cross anchors by cyclic
ranking, then take the SGD step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .anchors import AnchorBank, bank_from_frames
from .data import Checkpoint, FrameTable, sample_batch
from .errors import ConfigError, DimensionMismatch
from .evaluation import association_rate
from .linalg import ZERO_NORM
from .model import EmbeddingHead, LRSchedule, OptimizerState, backward, forward, make_head, sgd_step
from .objective import LossBreakdown, association_losses, loss_gradient

log = logging.getLogger(__name__)

ABLATIONS = ("joint", "I_only", "C_only")


@dataclass
class RunConfig:
    features: str = ""
    manifest: str = ""
    output_dir: str = "run"
    margin: float = 0.2
    tradeoff: float = 1.0
    update_rate: float = 0.5
    batch_size: int = 64
    max_iter: int = 2000
    seed: int = 0
    head: str = "linear"
    d_out: int = 0  # 0: same as input
    hidden: int = 64
    lr: float = 0.01
    lr_decay: float = 0.1
    lr_decay_interval: int = 0
    lr_milestones: tuple[int, ...] = (-1,)  # -1: halfway through max_iter
    momentum: float = 0.9
    eval_every: int = 100
    ablation: str = "joint"
    precision: str = "float32"
    balanced_sampling: bool = False

    def validate(self) -> None:
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.tradeoff < 0:
            raise ConfigError(f"tradeoff must be >= 0, got {self.tradeoff}")
        if not 0 < self.update_rate <= 1:
            raise ConfigError(f"update_rate must lie in (0, 1], got {self.update_rate}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.head not in ("identity", "linear", "onehidden"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ConfigError("lr and lr_decay must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    @property
    def loss_weights(self) -> tuple[float, float]:
        """``(intra_weight, cross_weight)`` for the configured ablation."""
        if self.ablation == "I_only":
            return 1.0, 0.0
        if self.ablation == "C_only":
            return 0.0, self.tradeoff
        return 1.0, self.tradeoff

    def schedule(self) -> LRSchedule:
        milestones = tuple(self.max_iter // 2 if m == -1 else m for m in self.lr_milestones)
        return LRSchedule(self.lr, self.lr_decay, self.lr_decay_interval, milestones)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    loss_I: float
    loss_C: float
    loss_total: float
    assoc_rate: float
    true_match_rate: float | None


@dataclass
class Trainer:
    table: FrameTable
    config: RunConfig
    head: EmbeddingHead
    optimizer: OptimizerState
    bank: AnchorBank
    rng: np.random.Generator
    iteration: int = 0
    history: list[MetricsRow] = field(default_factory=list)

    @property
    def dtype(self):
        return np.dtype(self.config.precision)

    @classmethod
    def create(cls, table: FrameTable, config: RunConfig) -> "Trainer":
        """Fresh head (seeded), anchors initialised as per-tracklet mean embeddings."""
        config.validate()
        table.require_cross_camera()
        dtype = np.dtype(config.precision)
        rng = np.random.default_rng(config.seed)
        d_out = config.d_out or table.dim
        head = make_head(config.head, table.dim, d_out, config.hidden, rng, dtype)
        emb = forward(head, table.features.astype(dtype))
        bank = bank_from_frames(emb, table.cameras, table.tracklets, table.sizes, config.update_rate)
        opt = OptimizerState(config.schedule(), config.momentum, np.zeros(head.n_params, dtype))
        return cls(table, config, head, opt, bank, rng)

    @classmethod
    def from_checkpoint(cls, table: FrameTable, config: RunConfig, ck: Checkpoint) -> "Trainer":
        config.validate()
        table.require_cross_camera()
        if ck.head.d_in != table.dim:
            raise DimensionMismatch(f"checkpoint head expects dim {ck.head.d_in}, dataset has {table.dim}")
        if ck.precision != config.precision:
            raise ConfigError(f"checkpoint precision {ck.precision} != configured {config.precision}")
        rng = np.random.default_rng()
        if ck.rng_state is not None:
            rng.bit_generator.state = ck.rng_state
        # the schedule follows the resumed run's max_iter, not the interrupted one
        opt = OptimizerState(config.schedule(), config.momentum, ck.optimizer.velocity, ck.optimizer.t)
        return cls(table, config, ck.head, opt, ck.bank, rng, ck.iteration)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            self.iteration,
            self.head.copy(),
            OptimizerState(self.optimizer.schedule, self.optimizer.momentum, self.optimizer.velocity.copy(), self.optimizer.t),
            self.bank.copy(),
            self.config.precision,
            self.rng.bit_generator.state,
        )

    def step(self, batch: np.ndarray | None = None) -> LossBreakdown | None:
        """Run one iteration; returns the batch losses (``None`` if every frame was rejected)."""
        cfg = self.config
        if batch is None:
            batch = sample_batch(self.rng, self.table, cfg.batch_size, cfg.balanced_sampling)
        X = self.table.features[batch].astype(self.dtype)
        F = forward(self.head, X)
        norms = np.sqrt(np.einsum("ij,ij->i", F, F))
        keep = norms >= ZERO_NORM
        if not np.all(keep):
            log.warning("iteration %d: dropping %d zero-norm embeddings", self.iteration, int((~keep).sum()))
            batch, X, F = batch[keep], X[keep], F[keep]
        self.iteration += 1
        if batch.size == 0:
            self.optimizer.t += 1
            return None
        cams = self.table.cameras[batch]
        trks = self.table.tracklets[batch]

        w_intra, w_cross = cfg.loss_weights
        losses = association_losses(F, cams, trks, self.bank, cfg.margin, w_cross, w_intra)
        grad_F = loss_gradient(F, cams, trks, self.bank, losses)

        touched = self.bank.apply_ema(cams, trks, F)
        self.bank.refresh_cross(touched)

        if self.head.n_params:
            pgrad, _ = backward(self.head, X, grad_F)
            self.head.params = sgd_step(self.optimizer, self.head.params, pgrad.astype(self.dtype, copy=False))
        else:
            self.optimizer.t += 1
        return losses

    def run(
        self,
        max_iter: int | None = None,
        monitor: Callable[[AnchorBank], float | None] | None = None,
        on_row: Callable[[MetricsRow], None] | None = None,
    ) -> list[MetricsRow]:
        """Iterate up to ``max_iter`` total iterations, recording a metrics row every
        ``eval_every`` iterations and at the configured final iteration.  Stopping
        early and resuming therefore yields the same rows as one long run.

        ``monitor`` computes the true-match rate from the bank; it is the only
        place identity labels may enter, and it never influences training.
        """
        max_iter = self.config.max_iter if max_iter is None else max_iter
        last = None
        while self.iteration < max_iter:
            losses = self.step()
            if losses is not None:
                last = losses
            if last is not None and (self.iteration % self.config.eval_every == 0 or self.iteration == self.config.max_iter):
                row = MetricsRow(
                    self.iteration,
                    last.loss_I,
                    last.loss_C,
                    last.loss_total,
                    association_rate(self.bank),
                    monitor(self.bank) if monitor else None,
                )
                self.history.append(row)
                if on_row:
                    on_row(row)
        return self.history


def embed_all(head: EmbeddingHead, features: np.ndarray) -> np.ndarray:
    """Embed every frame in float64 (evaluation path)."""
    h = EmbeddingHead(head.kind, head.d_in, head.d_out, head.hidden, head.params.astype(np.float64))
    return forward(h, features.astype(np.float64))


def dal_closure(
    head: EmbeddingHead,
    raw: np.ndarray,
    cameras: np.ndarray,
    tracklets: np.ndarray,
    bank: AnchorBank,
    margin: float = 0.2,
    tradeoff: float = 1.0,
    intra_weight: float = 1.0,
    wrt: str = "params",
):
    """Batch loss and its analytic gradient as a function of the head parameters
    (``wrt="params"``) or of the flattened raw inputs (``wrt="input"``).

    The per-camera mean rank-1 distance is frozen at the starting point, as the
    gradient treats it as a constant.  Returns ``(closure, x0, base_losses)``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    base = association_losses(forward(head, raw), cameras, tracklets, bank, margin, tradeoff, intra_weight)
    frozen = {s.camera: s.mean_rank1 for s in base.camera_stats}

    def closure(x):
        params, inputs = (x, raw) if wrt == "params" else (head.params, x.reshape(raw.shape))
        F = forward(head, inputs, params)
        losses = association_losses(F, cameras, tracklets, bank, margin, tradeoff, intra_weight, frozen)
        gF = loss_gradient(F, cameras, tracklets, bank, losses)
        pgrad, xgrad = backward(head, inputs, gF, params)
        return losses.loss_total, pgrad if wrt == "params" else xgrad.ravel()

    x0 = head.params.astype(np.float64) if wrt == "params" else raw.ravel().copy()
    return closure, x0, base
