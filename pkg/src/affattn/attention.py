"""Causal attention in five flavors: baseline softmax, off-by-one,
learnable sink, affine-scaled, and an optional output gate composable
with any of them.

The affine variant rescales the softmax weights per head and query
with an input-dependent factor ``alpha = phi(X @ W_a)`` and adds a
compensating bias ``beta = (alpha_ma - alpha) / N`` to every unmasked
key position, where ``alpha_ma`` is an exponential running mean of
alpha (treated as a constant inside the graph) and ``N`` is the key
sequence length. For the full-context query row this makes the
effective weights sum to exactly ``alpha_ma``.

All returned traces are plain numpy views of forward values, safe to
keep after the tape is gone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .activations import ActivationKind, apply_activation
from .numerics import ShapeError, Tensor

__all__ = [
    "VARIANT_KINDS",
    "AttentionVariant",
    "EmaState",
    "AttentionTrace",
    "StateError",
    "causal_mask",
    "scaled_logits",
    "sdpa_baseline",
    "softmax_one_rows",
    "softmax_sink_rows",
    "sdpa_sink",
    "affine_scaled_attention",
    "ema_update",
    "apply_output_gate",
]

VARIANT_KINDS = ("baseline", "off_by_one", "sink", "affine")


class StateError(RuntimeError):
    """Running-statistic state used or mutated in the wrong mode."""


@dataclass(frozen=True)
class AttentionVariant:
    """Which row normalization to use, and whether an output gate wraps it."""

    kind: str = "baseline"
    gated: bool = False

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}, expected one of {VARIANT_KINDS}")

    @property
    def label(self) -> str:
        return self.kind + ("_gated" if self.gated else "")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gated": self.gated}

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionVariant":
        return cls(kind=d["kind"], gated=bool(d.get("gated", False)))


@dataclass
class EmaState:
    """Per-head exponential running mean of the scale factor alpha.

    Starts at zero; each training step folds in the batch mean with
    momentum ``rho``: ``ma <- rho * ma + (1 - rho) * mean``. Frozen
    states (evaluation mode) refuse updates.
    """

    alpha_ma: np.ndarray
    rho: float
    step_count: int = 0
    frozen: bool = False

    @classmethod
    def fresh(cls, num_heads: int, rho: float) -> "EmaState":
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {rho}")
        return cls(alpha_ma=np.zeros(num_heads, dtype=np.float64), rho=rho)

    def copy(self) -> "EmaState":
        return EmaState(self.alpha_ma.copy(), self.rho, self.step_count, self.frozen)


def ema_update(ema: EmaState, batch_mean_alpha: np.ndarray) -> EmaState:
    """Fold one batch mean into the running estimate, in place.

    No gradient is recorded; the mean must already be detached.
    """
    if ema.frozen:
        raise StateError("EMA update attempted on a frozen (evaluation-mode) state")
    batch_mean_alpha = np.asarray(batch_mean_alpha, dtype=np.float64)
    if batch_mean_alpha.shape != ema.alpha_ma.shape:
        raise StateError(
            f"EMA head count mismatch: state {ema.alpha_ma.shape}, update {batch_mean_alpha.shape}"
        )
    if not np.isfinite(batch_mean_alpha).all():
        raise StateError("non-finite batch mean in EMA update")
    ema.alpha_ma = ema.rho * ema.alpha_ma + (1.0 - ema.rho) * batch_mean_alpha
    ema.step_count += 1
    return ema


@dataclass
class AttentionTrace:
    """Forward-pass quantities the diagnostics read.

    ``softmax_weights`` are the row-normalized probabilities (for sink
    variants, rows sum to 1 minus the sink mass). ``effective_weights``
    are the coefficients that actually multiply V; they equal
    ``softmax_weights`` except for the affine variant.
    """

    softmax_weights: np.ndarray  # [batch, head, query, key]
    effective_weights: np.ndarray
    qkt_logits: np.ndarray  # QK^T / sqrt(d_k), pre-normalization
    alpha_values: Optional[np.ndarray] = None  # [batch, head, query], affine only
    sink_mass: Optional[np.ndarray] = None  # [batch, head, query], sink variants

    @property
    def seq_len(self) -> int:
        return self.softmax_weights.shape[-1]


def causal_mask(seq_len: int) -> np.ndarray:
    """Lower-triangular boolean mask: True where key index <= query index."""
    return np.tril(np.ones((seq_len, seq_len), dtype=bool))


def scaled_logits(q: Tensor, k: Tensor) -> Tensor:
    """QK^T / sqrt(d_k) for [batch, head, seq, d_k] operands."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key depth mismatch: {q.shape} vs {k.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    return nm.mul(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), scale)


def sdpa_baseline(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray):
    """Standard scaled dot-product attention with row-softmax weights."""
    logits = scaled_logits(q, k)
    weights = nm.softmax_rows(logits, mask)
    out = nm.matmul(weights, v)
    trace = AttentionTrace(
        softmax_weights=weights.data,
        effective_weights=weights.data,
        qkt_logits=logits.data,
    )
    return out, trace


def _sink_weights(x: Tensor, s: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    """Row weights e^{x_i} / (sum_j e^{x_j} + e^{s}), stably.

    The shift ``m = max(row_max, s)`` is taken over unmasked entries
    and the sink logit jointly, so neither side can overflow. Masked
    entries are exactly 0. ``s`` broadcasts against the rows (one
    scalar per head in practice). Gradients flow to both ``x`` and
    ``s``.
    """
    xd = x.data
    if mask is None:
        masked = xd
    else:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise nm.DegenerateRowError("sink softmax row with every entry masked")
        masked = np.where(mask, xd, -np.inf)
    s_b = np.broadcast_to(s.data, xd.shape[:-1])[..., None]  # [..., rows, 1]
    m = np.maximum(masked.max(axis=-1, keepdims=True), s_b)
    e = np.exp(masked - m)
    es = np.exp(s_b - m)
    denom = e.sum(axis=-1, keepdims=True) + es
    p = e / denom
    sink = es / denom  # kept for the backward closure
    out = Tensor(p)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        gx = p * (g - dot)
        gs = nm._unbroadcast((-sink * dot)[..., 0], s.data.shape)
        return gx, gs

    return nm.record(out, (x, s), backward)


def softmax_sink_rows(x: Tensor, s: Tensor, mask: Optional[np.ndarray] = None):
    """Learnable-sink softmax: returns (weights, sink_mass).

    ``sink_mass`` is the complement of the row sum, so weights row-sum
    plus sink mass is 1 by construction and gradients through either
    output reach ``s``.
    """
    weights = _sink_weights(x, s, mask)
    sink_mass = nm.sub(1.0, nm.tsum(weights, axis=-1))
    return weights, sink_mass


def softmax_one_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Off-by-one softmax: a constant extra 1 in the denominator.

    Exactly the sink formulation with s frozen at 0.
    """
    zero = Tensor(np.zeros(x.shape[:-1]))
    return _sink_weights(x, zero, mask)


def sdpa_sink(q: Tensor, k: Tensor, v: Tensor, s: Tensor, mask: np.ndarray):
    """Sink attention; pass a constant s = 0 for the off-by-one variant."""
    logits = scaled_logits(q, k)
    weights, sink_mass = softmax_sink_rows(logits, s, mask)
    out = nm.matmul(weights, v)
    trace = AttentionTrace(
        softmax_weights=weights.data,
        effective_weights=weights.data,
        qkt_logits=logits.data,
        sink_mass=sink_mass.data,
    )
    return out, trace


def affine_scaled_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    x: Tensor,
    w_a: Tensor,
    ema: EmaState,
    phi: ActivationKind,
    mask: np.ndarray,
    training: bool,
):
    """Attention with per-head, per-query affine reweighting.

    ``x`` is the layer input hidden state [batch, seq, model_dim] and
    ``w_a`` maps model_dim -> num_heads. Effective weights are
    ``alpha * softmax + beta`` on unmasked positions and exactly 0
    elsewhere (the bias must not leak mass onto future keys). In
    training mode the EMA is updated after the forward pass with the
    detached batch mean of alpha over batch and sequence, so beta
    always uses the previous step's running mean.
    """
    num_heads = q.shape[1]
    if ema.alpha_ma.shape != (num_heads,):
        raise StateError(
            f"EMA state has {ema.alpha_ma.shape[0] if ema.alpha_ma.ndim else 0} heads, "
            f"attention has {num_heads}"
        )
    n_keys = k.shape[2]

    alpha_pre = nm.transpose(nm.matmul(x, w_a), (0, 2, 1))  # [batch, head, seq]
    alpha = apply_activation(phi, alpha_pre)
    alpha_ma = ema.alpha_ma.reshape(1, num_heads, 1)  # constant: no grad into the running mean
    beta = nm.div(nm.sub(Tensor(alpha_ma), alpha), float(n_keys))

    logits = scaled_logits(q, k)
    weights = nm.softmax_rows(logits, mask)

    alpha_e = nm.reshape(alpha, alpha.shape + (1,))
    beta_e = nm.reshape(beta, beta.shape + (1,))
    mask_f = np.broadcast_to(np.asarray(mask, dtype=np.float64), weights.shape)
    effective = nm.mul(nm.add(nm.mul(weights, alpha_e), beta_e), mask_f)
    out = nm.matmul(effective, v)

    if training:
        ema_update(ema, alpha.data.mean(axis=(0, 2)))

    trace = AttentionTrace(
        softmax_weights=weights.data,
        effective_weights=effective.data,
        qkt_logits=logits.data,
        alpha_values=alpha.data,
    )
    return out, trace


def apply_output_gate(attn_out: Tensor, x: Tensor, w_g: Tensor, phi: ActivationKind) -> Tensor:
    """Elementwise gate attn_out * phi(x @ w_g), after head concatenation."""
    if attn_out.shape != x.shape:
        raise ShapeError(f"gate input shapes disagree: {attn_out.shape} vs {x.shape}")
    if w_g.shape != (x.shape[-1], x.shape[-1]):
        raise ShapeError(f"gate projection must be square over model_dim, got {w_g.shape}")
    gate = apply_activation(phi, nm.matmul(x, w_g))
    return nm.mul(attn_out, gate)
