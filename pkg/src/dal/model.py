"""Embedding heads, SGD with momentum, and a finite-difference checker.

Heads map precomputed frame features to embeddings.  Parameters live in one
flat vector so the optimizer and checkpoints can treat every head alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, NonFiniteGradient

HEAD_KINDS = ("identity", "linear", "onehidden")


@dataclass
class EmbeddingHead:
    kind: str
    d_in: int
    d_out: int
    hidden: int = 0
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.kind == "identity" and self.d_in != self.d_out:
            raise DimensionMismatch("identity head needs d_in == d_out")
        if self.kind == "onehidden" and self.hidden <= 0:
            raise ValueError("onehidden head needs hidden > 0")
        self.params = np.asarray(self.params)
        if self.params.size != self.n_params:
            raise DimensionMismatch(f"{self.kind} head expects {self.n_params} parameters, got {self.params.size}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("non-finite head parameters")

    @property
    def n_params(self) -> int:
        if self.kind == "identity":
            return 0
        if self.kind == "linear":
            return self.d_out * self.d_in + self.d_out
        h = self.hidden
        return h * self.d_in + h + self.d_out * h + self.d_out

    def unpack(self, params: np.ndarray | None = None) -> list[np.ndarray]:
        p = self.params if params is None else params
        if self.kind == "identity":
            return []
        if self.kind == "linear":
            n = self.d_out * self.d_in
            return [p[:n].reshape(self.d_out, self.d_in), p[n:]]
        h, di, do = self.hidden, self.d_in, self.d_out
        shapes = [(h, di), (h,), (do, h), (do,)]
        out, pos = [], 0
        for s in shapes:
            n = math.prod(s)
            out.append(p[pos : pos + n].reshape(s))
            pos += n
        return out

    def copy(self) -> "EmbeddingHead":
        return EmbeddingHead(self.kind, self.d_in, self.d_out, self.hidden, self.params.copy())


def make_head(kind: str, d_in: int, d_out: int | None = None, hidden: int = 0, rng=None, dtype=np.float64) -> EmbeddingHead:
    """Build a head with symmetric fan-based uniform weights and zero biases."""
    d_out = d_in if d_out is None else d_out
    rng = np.random.default_rng(rng)
    if kind == "identity":
        return EmbeddingHead(kind, d_in, d_out, 0, np.zeros(0, dtype))

    def glorot(fan_out, fan_in):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_out, fan_in))

    if kind == "linear":
        parts = [glorot(d_out, d_in), np.zeros(d_out)]
    elif kind == "onehidden":
        parts = [glorot(hidden, d_in), np.zeros(hidden), glorot(d_out, hidden), np.zeros(d_out)]
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    params = np.concatenate([p.ravel() for p in parts]).astype(dtype)
    return EmbeddingHead(kind, d_in, d_out, hidden, params)


def _check_input(head: EmbeddingHead, raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.shape[-1] != head.d_in:
        raise DimensionMismatch(f"head expects input dim {head.d_in}, got {raw.shape[-1]}")
    return raw


def forward(head: EmbeddingHead, raw, params: np.ndarray | None = None) -> np.ndarray:
    """Embed one vector or a batch of row vectors."""
    raw = _check_input(head, raw)
    if head.kind == "identity":
        return raw.copy()
    parts = head.unpack(params)
    if head.kind == "linear":
        W, b = parts
        return raw @ W.T + b
    W1, b1, W2, b2 = parts
    return np.maximum(raw @ W1.T + b1, 0.0) @ W2.T + b2


def backward(head: EmbeddingHead, raw, upstream, params: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(parameter_grad, input_grad)`` for upstream gradient ``upstream``.

    Works on single vectors or batches; for a batch the parameter gradient is
    summed over rows.
    """
    raw = _check_input(head, raw)
    upstream = np.asarray(upstream)
    if upstream.shape[-1] != head.d_out or upstream.shape[:-1] != raw.shape[:-1]:
        raise DimensionMismatch(f"upstream shape {upstream.shape} does not match output of input {raw.shape}")
    if head.kind == "identity":
        return np.zeros(0, dtype=upstream.dtype), upstream.copy()
    X = np.atleast_2d(raw)
    G = np.atleast_2d(upstream)
    parts = head.unpack(params)
    if head.kind == "linear":
        W, _ = parts
        gW = G.T @ X
        gb = G.sum(axis=0)
        gx = G @ W
        pgrad = np.concatenate([gW.ravel(), gb])
    else:
        W1, b1, W2, _ = parts
        pre = X @ W1.T + b1
        hid = np.maximum(pre, 0.0)
        gW2 = G.T @ hid
        gb2 = G.sum(axis=0)
        gh = (G @ W2) * (pre > 0)
        gW1 = gh.T @ X
        gb1 = gh.sum(axis=0)
        gx = gh @ W1
        pgrad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    return pgrad, gx.reshape(raw.shape)


@dataclass
class LRSchedule:
    """Step decay: ``initial * decay_factor ** n`` after ``n`` decay events.

    Events happen every ``decay_interval`` iterations when that is positive,
    otherwise at each entry of ``milestones``.
    """

    initial: float = 0.01
    decay_factor: float = 1.0
    decay_interval: int = 0
    milestones: tuple[int, ...] = ()

    def __post_init__(self):
        if self.initial <= 0 or self.decay_factor <= 0:
            raise ValueError("learning rate and decay factor must be positive")
        self.milestones = tuple(int(m) for m in self.milestones)

    def rate(self, t: int) -> float:
        if self.decay_interval > 0:
            n = t // self.decay_interval
        else:
            n = sum(1 for m in self.milestones if t >= m)
        return self.initial * self.decay_factor**n


@dataclass
class OptimizerState:
    schedule: LRSchedule
    momentum: float = 0.9
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Momentum SGD: ``v = mu * v + g; p -= rate(t) * v``.  Updates ``state`` in place."""
    grads = np.asarray(grads)
    if grads.shape != params.shape:
        raise DimensionMismatch(f"gradient shape {grads.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteGradient(f"iteration {state.t}: non-finite gradient at coordinates {bad[:10].tolist()}")
    if state.velocity.shape != params.shape:
        state.velocity = np.zeros_like(params)
    state.velocity = state.momentum * state.velocity + grads
    new = params - state.schedule.rate(state.t) * state.velocity
    state.t += 1
    return new


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray
    checked: np.ndarray

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def finite_diff_check(
    params: np.ndarray,
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    coords: Sequence[int] | None = None,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare an analytic gradient with central differences.

    ``loss_and_grad(p)`` returns the loss and its claimed gradient at ``p``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    coordinates with vanishing gradients from dominating.
    """
    p0 = np.array(params, dtype=np.float64)
    _, analytic = loss_and_grad(p0.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    idx = np.arange(p0.size) if coords is None else np.asarray(coords, dtype=np.int64)
    numeric = np.empty(idx.size)
    for n, i in enumerate(idx):
        p = p0.copy()
        p.flat[i] = p0.flat[i] + step
        up, _ = loss_and_grad(p)
        p.flat[i] = p0.flat[i] - step
        down, _ = loss_and_grad(p)
        numeric[n] = (up - down) / (2 * step)
    a = analytic[idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    rel = np.abs(a - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(
        float(rel[worst]) if rel.size else 0.0,
        int(idx[worst]) if rel.size else -1,
        a,
        numeric,
        idx,
    )
