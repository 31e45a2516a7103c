"""Transformer building blocks and the Adam optimizer on top of :mod:`pdtlab.tensor`.

Blocks follow the SASRec layout: post-norm residual sublayers
(attention, then a GELU feed-forward), dropout on each sublayer output, and
learned absolute positions.  Sequences are left-padded, so the most recent
token always sits in the last slot; positions are assigned from the right so
that the last slot maps to the same positional row whatever the sequence
length.  Row 0 of the positional table is reserved for the CLS token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 2
    d_model: int = 128
    d_ff: int = 256
    dropout_p: float = 0.2
    max_len: int = 9
    causal: bool = False
    use_cls: bool = True
    attention_dropout: bool = False

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1 or self.d_ff < 1:
            raise ConfigError("num_layers, num_heads and d_ff must be positive")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.max_len < 1:
            raise ConfigError("max_len must be at least 1")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p={self.dropout_p} outside [0, 1)")


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self) -> Iterator[Tuple[str, Tensor]]:
        for k, v in self.__dict__.items():
            yield k, v


@dataclass
class BlockParams:
    """All weights of one encoder stack, including the input stage."""

    layers: List[LayerParams]
    ln_in_g: Tensor
    ln_in_b: Tensor
    pos: Tensor
    cls: Optional[Tensor] = None

    def named(self) -> Iterator[Tuple[str, Tensor]]:
        yield "ln_in_g", self.ln_in_g
        yield "ln_in_b", self.ln_in_b
        yield "pos", self.pos
        if self.cls is not None:
            yield "cls", self.cls
        for i, layer in enumerate(self.layers):
            for k, v in layer.named():
                yield f"layers.{i}.{k}", v

    def tied(self) -> "BlockParams":
        """A view sharing every tensor except the CLS vector."""
        return BlockParams(self.layers, self.ln_in_g, self.ln_in_b, self.pos, cls=None)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_block_params(cfg: EncoderConfig, rng: np.random.Generator, emb_scale: float = 0.02) -> BlockParams:
    d, f = cfg.d_model, cfg.d_ff
    layers = []
    for _ in range(cfg.num_layers):
        layers.append(
            LayerParams(
                wq=T.parameter(_xavier(rng, d, d)),
                wk=T.parameter(_xavier(rng, d, d)),
                wv=T.parameter(_xavier(rng, d, d)),
                wo=T.parameter(_xavier(rng, d, d)),
                w1=T.parameter(_xavier(rng, d, f)),
                b1=T.parameter(np.zeros(f)),
                w2=T.parameter(_xavier(rng, f, d)),
                b2=T.parameter(np.zeros(d)),
                ln1_g=T.parameter(np.ones(d)),
                ln1_b=T.parameter(np.zeros(d)),
                ln2_g=T.parameter(np.ones(d)),
                ln2_b=T.parameter(np.zeros(d)),
            )
        )
    pos = T.parameter(rng.uniform(-emb_scale, emb_scale, size=(cfg.max_len + 1, d)))
    cls = T.parameter(rng.uniform(-emb_scale, emb_scale, size=(d,))) if cfg.use_cls else None
    return BlockParams(layers, T.parameter(np.ones(d)), T.parameter(np.zeros(d)), pos, cls)


def embedding_forward(table: Tensor, indices, pad_index: int = 0) -> Tensor:
    return T.embedding(table, indices, pad_index)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) during training."""
    if not 0 <= p < 1:
        raise ContractError(f"dropout p={p} outside [0, 1)")
    if not training or p == 0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return T.mul(x, T.Tensor(mask, dtype=x.dtype.type))


def attention_mask(key_padding_mask: np.ndarray, causal: bool) -> np.ndarray:
    """Boolean [B, 1, L, L] mask, true where query i may not attend to key j."""
    kpm = np.asarray(key_padding_mask, dtype=bool)
    B, L = kpm.shape
    blocked = np.broadcast_to(kpm[:, None, None, :], (B, 1, L, L))
    if causal:
        blocked = blocked | np.triu(np.ones((L, L), dtype=bool), k=1)[None, None]
    return blocked


def multi_head_attention(
    x: Tensor,
    key_padding_mask,
    cfg: EncoderConfig,
    params: LayerParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Scaled dot-product self-attention over ``cfg.num_heads`` heads.

    ``key_padding_mask`` is true at pad slots.  Pad queries whose every key is
    masked produce zero attention output; a sequence made only of pads is a
    contract error.
    """
    B, L, d = x.shape
    if d != cfg.d_model:
        raise DimensionError(f"attention input width {d} != d_model {cfg.d_model}")
    kpm = np.asarray(key_padding_mask, dtype=bool)
    if kpm.shape != (B, L):
        raise DimensionError(f"key_padding_mask shape {list(kpm.shape)} != {[B, L]}")
    if kpm.all(axis=1).any():
        raise ContractError("attention row fully masked: a sequence contains only padding")
    H = cfg.num_heads
    dh = d // H

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

    q = heads(x @ params.wq)
    k = heads(x @ params.wk)
    v = heads(x @ params.wv)
    scores = (q @ T.swap_last(k)) * (1.0 / math.sqrt(dh))
    blocked = attention_mask(kpm, cfg.causal)
    dead = blocked.all(axis=-1, keepdims=True)
    if dead.any():
        scores = T.masked_fill(scores, blocked & ~dead, -np.inf)
        weights = T.masked_fill(T.softmax(scores, axis=-1), np.broadcast_to(dead, blocked.shape), 0.0)
    else:
        weights = T.softmax(T.masked_fill(scores, blocked, -np.inf), axis=-1)
    if cfg.attention_dropout:
        weights = dropout(weights, cfg.dropout_p, training, rng)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    return ctx @ params.wo


def feed_forward(x: Tensor, params: LayerParams) -> Tensor:
    return T.gelu(x @ params.w1 + params.b1) @ params.w2 + params.b2


def transformer_block(
    x: Tensor,
    key_padding_mask,
    cfg: EncoderConfig,
    params: LayerParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    a = multi_head_attention(x, key_padding_mask, cfg, params, training, rng)
    a = dropout(a, cfg.dropout_p, training, rng)
    x = T.layer_norm(x + a, params.ln1_g, params.ln1_b, LN_EPS)
    f = dropout(feed_forward(x, params), cfg.dropout_p, training, rng)
    return T.layer_norm(x + f, params.ln2_g, params.ln2_b, LN_EPS)


def position_rows(length: int, max_len: int) -> np.ndarray:
    """Positional-table rows for a right-aligned sequence of ``length`` slots."""
    return np.arange(max_len - length + 1, max_len + 1)


def encoder_forward(
    token_embs: Tensor,
    key_padding_mask,
    cfg: EncoderConfig,
    params: BlockParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Run an encoder stack.

    Returns the CLS output ``[B, d]`` when ``cfg.use_cls`` and the full
    sequence ``[B, L, d]`` otherwise.
    """
    B, L, d = token_embs.shape
    if L > cfg.max_len:
        raise ContractError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if cfg.use_cls and params.cls is None:
        raise ContractError("encoder configured with use_cls but has no CLS vector")
    kpm = np.asarray(key_padding_mask, dtype=bool)

    h = T.layer_norm(token_embs, params.ln_in_g, params.ln_in_b, LN_EPS)
    h = dropout(h, cfg.dropout_p, training, rng)
    pos = params.pos[position_rows(L, cfg.max_len)]
    h = h + T.expand(pos, (B, L, d))
    if cfg.use_cls:
        cls = T.expand((params.cls + params.pos[0]).reshape(1, 1, d), (B, 1, d))
        h = T.concat([cls, h], axis=1)
        kpm = np.concatenate([np.zeros((B, 1), dtype=bool), kpm], axis=1)
    for layer in params.layers:
        h = transformer_block(h, kpm, cfg, layer, training, rng)
    if cfg.use_cls:
        return h[:, 0, :]
    return h


# -- Adam ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    Parameters whose gradient is ``None`` are skipped entirely.
    """
    step = state.t + 1
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name} at step {step}", step=step)
    state.t = step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {list(g.shape)}, parameter {list(p.shape)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_grad_norm(grads: Dict[str, Optional[np.ndarray]]) -> float:
    return math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values() if g is not None))


def clip_grad_norm(grads: Dict[str, Optional[np.ndarray]], max_norm: float) -> float:
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return norm
