"""Desk-scale decoder-only transformer wired for swappable attention.

Layer layout is pre-norm RMS throughout: x + attn(norm(x)) then
x + mlp(norm(x)), with a final norm before the (untied) output
projection. The attention variant only changes attention-internal
parameters, so two models built from configs that differ in the
variant alone share every other parameter shape and, thanks to named
init streams, every other parameter value.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import numerics as nm
from .activations import ActivationKind, apply_activation
from .attention import (
    AttentionTrace,
    AttentionVariant,
    EmaState,
    affine_scaled_attention,
    apply_output_gate,
    causal_mask,
    sdpa_baseline,
    sdpa_sink,
)
from .numerics import ShapeError, Tensor
from .seeding import rng_for

__all__ = [
    "ModelConfig",
    "TransformerModel",
    "ForwardStats",
    "InputError",
    "CheckpointFormatError",
    "count_params",
    "rmsnorm",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"AFFATTN1"
POSITIONAL_KINDS = ("learned_absolute", "rotary")
RMSNORM_EPS = 1e-6


class InputError(ValueError):
    """Caller-supplied data violates a precondition."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not match the expected layout or version."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    model_dim: int = 128
    num_heads: int = 4
    num_layers: int = 4
    mlp_ratio: float = 4.0
    max_seq_len: int = 128
    attention: AttentionVariant = field(default_factory=AttentionVariant)
    phi_alpha: ActivationKind = ActivationKind.LINEAR_CLIPPING
    phi_gate: ActivationKind = ActivationKind.SIGMOID
    rho: float = 0.9
    positional: str = "learned_absolute"
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be at least 2")
        if self.positional not in POSITIONAL_KINDS:
            raise ValueError(f"positional must be one of {POSITIONAL_KINDS}")
        if self.positional == "rotary" and (self.model_dim // self.num_heads) % 2 != 0:
            raise ValueError("rotary positions need an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.model_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "model_dim": self.model_dim,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
            "mlp_ratio": self.mlp_ratio,
            "max_seq_len": self.max_seq_len,
            "attention": self.attention.to_dict(),
            "phi_alpha": self.phi_alpha.value,
            "phi_gate": self.phi_gate.value,
            "rho": self.rho,
            "positional": self.positional,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            vocab_size=d["vocab_size"],
            model_dim=d["model_dim"],
            num_heads=d["num_heads"],
            num_layers=d["num_layers"],
            mlp_ratio=d["mlp_ratio"],
            max_seq_len=d["max_seq_len"],
            attention=AttentionVariant.from_dict(d["attention"]),
            phi_alpha=ActivationKind(d["phi_alpha"]),
            phi_gate=ActivationKind(d["phi_gate"]),
            rho=d["rho"],
            positional=d["positional"],
            seed=d["seed"],
        )


@dataclass
class ForwardStats:
    """Cheap per-forward scalars the training loop logs every step."""

    qkt_mean: float
    alpha_means: Optional[list[float]] = None  # per layer, affine only


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    """Row RMS normalization times a learned gain."""
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + RMSNORM_EPS
    scale = ms**-0.5
    out = Tensor(x.data * scale * gain.data)

    def backward(g):
        gg = g * gain.data
        n = x.data.shape[-1]
        dot = (x.data * gg).sum(axis=-1, keepdims=True)
        gx = scale * (gg - (scale * scale / n) * x.data * dot)
        ggain = (g * x.data * scale).sum(axis=tuple(range(g.ndim - 1)))
        return gx, ggain

    return nm.record(out, (x, gain), backward)


def _rotary_tables(seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    angles = np.concatenate([angles, angles], axis=-1)  # [seq, head_dim]
    return np.cos(angles), np.sin(angles)


def rotary_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Apply the rotation y = x*cos + rot_half(x)*sin along the last axis.

    ``rot_half`` maps (a, b) halves to (-b, a); the backward pass uses
    its transpose (b, -a).
    """
    half = x.shape[-1] // 2

    def rot(arr):
        return np.concatenate([-arr[..., half:], arr[..., :half]], axis=-1)

    def rot_t(arr):
        return np.concatenate([arr[..., half:], -arr[..., :half]], axis=-1)

    out = Tensor(x.data * cos + rot(x.data) * sin)
    return nm.record(out, (x,), lambda g: (g * cos + rot_t(g * sin),))


@dataclass
class _Layer:
    attn_norm: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    mlp_norm: Tensor
    w_in: Tensor
    w_out: Tensor
    sink_s: Optional[Tensor] = None
    w_a: Optional[Tensor] = None
    w_g: Optional[Tensor] = None
    ema: Optional[EmaState] = None


class TransformerModel:
    """Token embedding, N attention/MLP blocks, output projection."""

    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        d, h = cfg.model_dim, cfg.num_heads

        def param(name: str, shape: tuple[int, ...], std: float = 0.02) -> Tensor:
            if std == 0.0:
                data = np.zeros(shape)
            else:
                data = rng_for(cfg.seed, f"init/{name}") .standard_normal(shape) * std
            return Tensor(data, requires_grad=True)

        self.tok_emb = param("tok_emb", (cfg.vocab_size, d))
        self.pos_emb = (
            param("pos_emb", (cfg.max_seq_len, d)) if cfg.positional == "learned_absolute" else None
        )
        self.layers: list[_Layer] = []
        for i in range(cfg.num_layers):
            layer = _Layer(
                attn_norm=Tensor(np.ones(d), requires_grad=True),
                w_q=param(f"layers.{i}.w_q", (d, d)),
                w_k=param(f"layers.{i}.w_k", (d, d)),
                w_v=param(f"layers.{i}.w_v", (d, d)),
                w_o=param(f"layers.{i}.w_o", (d, d)),
                mlp_norm=Tensor(np.ones(d), requires_grad=True),
                w_in=param(f"layers.{i}.w_in", (d, cfg.mlp_hidden)),
                w_out=param(f"layers.{i}.w_out", (cfg.mlp_hidden, d)),
            )
            kind = cfg.attention.kind
            if kind == "sink":
                layer.sink_s = param(f"layers.{i}.sink_s", (h,), std=0.0)
            elif kind == "affine":
                layer.w_a = param(f"layers.{i}.w_a", (d, h))
                layer.ema = EmaState.fresh(h, cfg.rho)
            if cfg.attention.gated:
                layer.w_g = param(f"layers.{i}.w_g", (d, d))
            self.layers.append(layer)
        self.final_norm = Tensor(np.ones(d), requires_grad=True)
        self.out_proj = param("out_proj", (d, cfg.vocab_size))

        if cfg.positional == "rotary":
            self._rot_cos, self._rot_sin = _rotary_tables(cfg.max_seq_len, cfg.head_dim)

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        """Stable name -> tensor map, in a fixed order."""
        out = {"tok_emb": self.tok_emb}
        if self.pos_emb is not None:
            out["pos_emb"] = self.pos_emb
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}."
            out[p + "attn_norm"] = layer.attn_norm
            out[p + "w_q"] = layer.w_q
            out[p + "w_k"] = layer.w_k
            out[p + "w_v"] = layer.w_v
            if layer.sink_s is not None:
                out[p + "sink_s"] = layer.sink_s
            if layer.w_a is not None:
                out[p + "w_a"] = layer.w_a
            if layer.w_g is not None:
                out[p + "w_g"] = layer.w_g
            out[p + "w_o"] = layer.w_o
            out[p + "mlp_norm"] = layer.mlp_norm
            out[p + "w_in"] = layer.w_in
            out[p + "w_out"] = layer.w_out
        out["final_norm"] = self.final_norm
        out["out_proj"] = self.out_proj
        return out

    def zero_grads(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def ema_states(self) -> list[Optional[EmaState]]:
        return [layer.ema for layer in self.layers]

    def set_eval(self, frozen: bool = True) -> None:
        """Freeze (or thaw) every EMA state for evaluation."""
        for layer in self.layers:
            if layer.ema is not None:
                layer.ema.frozen = frozen

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _split_heads(self, t: Tensor, batch: int, seq: int) -> Tensor:
        cfg = self.config
        return nm.transpose(
            nm.reshape(t, (batch, seq, cfg.num_heads, cfg.head_dim)), (0, 2, 1, 3)
        )

    def forward(
        self,
        token_ids: np.ndarray,
        training: bool = False,
        collect_traces: bool = False,
    ):
        """Next-token logits for a [batch, seq] block of token ids.

        Returns (logits, traces, stats); ``traces`` is a per-layer list
        of AttentionTrace when requested, else None. EMA states advance
        once per call when ``training`` is True.
        """
        cfg = self.config
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise InputError(f"token_ids must be [batch, seq], got shape {ids.shape}")
        batch, seq = ids.shape
        if seq > cfg.max_seq_len:
            raise InputError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise InputError("token id out of vocabulary range")

        mask = causal_mask(seq)
        x = nm.embedding(self.tok_emb, ids)
        if self.pos_emb is not None:
            x = nm.add(x, nm.embedding(self.pos_emb, np.arange(seq)))

        traces: list[AttentionTrace] = []
        qkt_sum, qkt_count = 0.0, 0
        alpha_means: list[float] = []

        for layer in self.layers:
            xn = rmsnorm(x, layer.attn_norm)
            q = self._split_heads(nm.matmul(xn, layer.w_q), batch, seq)
            k = self._split_heads(nm.matmul(xn, layer.w_k), batch, seq)
            v = self._split_heads(nm.matmul(xn, layer.w_v), batch, seq)
            if cfg.positional == "rotary":
                cos, sin = self._rot_cos[:seq], self._rot_sin[:seq]
                q = rotary_rotate(q, cos, sin)
                k = rotary_rotate(k, cos, sin)

            kind = cfg.attention.kind
            if kind == "baseline":
                attn, trace = sdpa_baseline(q, k, v, mask)
            elif kind == "off_by_one":
                s_zero = Tensor(np.zeros(cfg.num_heads))
                attn, trace = sdpa_sink(q, k, v, s_zero, mask)
            elif kind == "sink":
                attn, trace = sdpa_sink(q, k, v, layer.sink_s, mask)
            else:
                attn, trace = affine_scaled_attention(
                    q, k, v, xn, layer.w_a, layer.ema, cfg.phi_alpha, mask, training
                )
                alpha_means.append(float(trace.alpha_values.mean()))

            merged = nm.reshape(nm.transpose(attn, (0, 2, 1, 3)), (batch, seq, cfg.model_dim))
            if cfg.attention.gated:
                merged = apply_output_gate(merged, xn, layer.w_g, cfg.phi_gate)
            x = nm.add(x, nm.matmul(merged, layer.w_o))

            xm = rmsnorm(x, layer.mlp_norm)
            hidden = apply_activation(ActivationKind.GELU, nm.matmul(xm, layer.w_in))
            x = nm.add(x, nm.matmul(hidden, layer.w_out))

            qkt_sum += float(trace.qkt_logits[..., mask].sum())
            qkt_count += batch * cfg.num_heads * int(mask.sum())
            if collect_traces:
                traces.append(trace)

        xf = rmsnorm(x, self.final_norm)
        logits = nm.matmul(xf, self.out_proj)
        stats = ForwardStats(
            qkt_mean=qkt_sum / qkt_count,
            alpha_means=alpha_means if cfg.attention.kind == "affine" else None,
        )
        return logits, (traces if collect_traces else None), stats


# ----------------------------------------------------------------------
# parameter accounting
# ----------------------------------------------------------------------


def _variant_extra_params(config: ModelConfig) -> int:
    extra = 0
    kind = config.attention.kind
    if kind == "sink":
        extra += config.num_heads * config.num_layers
    elif kind == "affine":
        extra += config.model_dim * config.num_heads * config.num_layers
    if config.attention.gated:
        extra += config.model_dim * config.model_dim * config.num_layers
    return extra


def count_params(config: ModelConfig) -> tuple[int, int]:
    """(total, delta) exact parameter counts for a config.

    ``delta`` is the surplus over an ungated baseline with identical
    dimensions: per layer, model_dim * num_heads for the affine scale
    projection, num_heads for sink scalars, model_dim^2 for the gate.
    """
    d = config.model_dim
    base = config.vocab_size * d  # token embedding
    if config.positional == "learned_absolute":
        base += config.max_seq_len * d
    per_layer = 2 * d + 4 * d * d + d * config.mlp_hidden + config.mlp_hidden * d
    base += per_layer * config.num_layers
    base += d + d * config.vocab_size  # final norm + output projection
    delta = _variant_extra_params(config)
    return base + delta, delta


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_checkpoint(
    model: TransformerModel,
    path: str,
    optimizer_state: Optional[dict] = None,
    train_step: int = 0,
) -> None:
    """Single-file checkpoint: magic, JSON header, then f64 LE blobs.

    The header records the config, the ordered parameter names and
    shapes, every EMA state, and (optionally) optimizer moment names.
    Blobs follow in header order: parameters first, then optimizer
    moments (m then v per parameter).
    """
    params = model.parameters()
    header = {
        "config": model.config.to_dict(),
        "train_step": train_step,
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
        "ema": [
            None
            if ema is None
            else {"alpha_ma": ema.alpha_ma.tolist(), "rho": ema.rho, "step_count": ema.step_count}
            for ema in model.ema_states()
        ],
        "optimizer": None,
    }
    blobs = [t.data for t in params.values()]
    if optimizer_state is not None:
        header["optimizer"] = {"step": optimizer_state["step"], "params": list(params.keys())}
        for name in params:
            blobs.append(optimizer_state["m"][name])
            blobs.append(optimizer_state["v"][name])

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    header_bytes = json.dumps(header).encode("utf-8")
    buf.write(struct.pack("<Q", len(header_bytes)))
    buf.write(header_bytes)
    for blob in blobs:
        buf.write(np.ascontiguousarray(blob, dtype="<f8").tobytes())
    _atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str):
    """Rebuild (model, optimizer_state, train_step) from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a recognized checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        header = json.loads(raw[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointFormatError(f"corrupt checkpoint header in {path}") from err
    off += header_len

    config = ModelConfig.from_dict(header["config"])
    model = TransformerModel(config)
    params = model.parameters()

    def read_blob(shape) -> np.ndarray:
        nonlocal off
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += n * 8
        return np.ascontiguousarray(arr)

    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in params:
            raise CheckpointFormatError(f"checkpoint parameter {name!r} not in model")
        if params[name].shape != shape:
            raise CheckpointFormatError(
                f"shape mismatch for {name!r}: checkpoint {shape}, model {params[name].shape}"
            )
        params[name].data = read_blob(shape)

    for layer, ema_dict in zip(model.layers, header["ema"]):
        if ema_dict is None:
            continue
        layer.ema = EmaState(
            alpha_ma=np.asarray(ema_dict["alpha_ma"], dtype=np.float64),
            rho=ema_dict["rho"],
            step_count=ema_dict["step_count"],
        )

    optimizer_state = None
    if header["optimizer"] is not None:
        m, v = {}, {}
        for name in header["optimizer"]["params"]:
            m[name] = read_blob(params[name].shape)
            v[name] = read_blob(params[name].shape)
        optimizer_state = {"step": header["optimizer"]["step"], "m": m, "v": v}
    return model, optimizer_state, header["train_step"]
