"""The dual-encoder pre-training model, the tied sequential decoder and their losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .data import PAD, FinetuneBatch, PretrainBatch
from .errors import ConfigError, ContractError, DimensionError
from .nn import BlockParams, EncoderConfig
from .tensor import Tensor

EMB_INIT = 0.02


class DuplicateAnchorWarning(UserWarning):
    """An in-batch contrastive loss saw the same entity twice (false negatives)."""


@dataclass(frozen=True)
class LossConfig:
    lambda_u: float = 0.01
    lambda_c: float = 0.01
    temperature: float = 0.5
    denominator_mode: str = "standard"
    bpr_mode: str = "standard"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.lambda_u < 0 or self.lambda_c < 0:
            raise ConfigError("lambda weights must be non-negative")
        if self.denominator_mode not in ("standard", "exclude_positive"):
            raise ConfigError(f"unknown denominator_mode {self.denominator_mode!r}")
        if self.bpr_mode not in ("standard", "as_written"):
            raise ConfigError(f"unknown bpr_mode {self.bpr_mode!r}")


class PdtModel:
    """Embedding tables, the two history encoders and the tied decoder.

    ``g_r`` shares every tensor of ``g_u`` except the CLS vector; since CLS
    sits in row 0 of the shared positional table and the decoder never reads
    that row, the CLS positional row is effectively ``g_u``-only as well.
    """

    def __init__(self, f_u: Tensor, f_c: Tensor, g_u: BlockParams, g_c: BlockParams,
                 enc_u: EncoderConfig, enc_c: EncoderConfig, user_proj: Optional[Tensor] = None):
        self.f_u = f_u
        self.f_c = f_c
        self.g_u = g_u
        self.g_c = g_c
        self.g_r = g_u.tied()
        self.user_proj = user_proj
        self.cfg_u = enc_u
        self.cfg_c = enc_c
        self.cfg_r = EncoderConfig(**{**enc_u.__dict__, "causal": True, "use_cls": False})
        if (user_proj is None) != (self.d_user == self.d_content):
            raise ContractError("user_proj must be present exactly when user and content widths differ")

    @classmethod
    def create(cls, n_users: int, n_items: int, d_user: int, d_content: int, *, num_layers=2,
               num_heads=2, d_ff=256, dropout_p=0.2, max_len=9, attention_dropout=False, rng=None) -> "PdtModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        enc_u = EncoderConfig(num_layers, num_heads, d_content, d_ff, dropout_p, max_len, False, True, attention_dropout)
        enc_c = EncoderConfig(num_layers, num_heads, d_content, d_ff, dropout_p, max_len, False, True, attention_dropout)
        f_u = _table(rng, n_users + 1, d_user)
        f_c = _table(rng, n_items + 1, d_content)
        g_u = nn.init_block_params(enc_u, rng)
        g_c = nn.init_block_params(enc_c, rng)
        proj = None
        if d_user != d_content:
            proj = T.parameter(nn._xavier(rng, d_user, d_content))
        return cls(f_u, f_c, g_u, g_c, enc_u, enc_c, proj)

    @property
    def d_user(self) -> int:
        return self.f_u.shape[1]

    @property
    def d_content(self) -> int:
        return self.f_c.shape[1]

    @property
    def n_users(self) -> int:
        return self.f_u.shape[0] - 1

    @property
    def n_items(self) -> int:
        return self.f_c.shape[0] - 1

    def named_parameters(self) -> Dict[str, Tensor]:
        out = {"f_u": self.f_u, "f_c": self.f_c}
        for k, v in self.g_u.named():
            out[f"g_u.{k}"] = v
        for k, v in self.g_c.named():
            out[f"g_c.{k}"] = v
        if self.user_proj is not None:
            out["user_proj"] = self.user_proj
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ContractError(f"state is missing parameters {sorted(missing)}")
        for k, p in params.items():
            arr = state[k]
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: stored shape {list(arr.shape)} != model shape {list(p.shape)}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def g_u_exclusive(self) -> Dict[str, Tensor]:
        return {"g_u.cls": self.g_u.cls}

    def g_c_exclusive(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith("g_c.")}


def _table(rng, rows: int, d: int) -> Tensor:
    w = rng.uniform(-EMB_INIT, EMB_INIT, size=(rows, d))
    w[PAD] = 0.0
    return T.parameter(w)


def _user_vectors(model: PdtModel, ids) -> Tensor:
    e = T.embedding(model.f_u, ids, PAD)
    if model.user_proj is not None:
        e = e @ model.user_proj
    return e


def encode_user_history(model: PdtModel, histories, training=False, rng=None) -> Tensor:
    """CLS summary of item histories ``[B, L_u]`` -> ``[B, d_c]``."""
    h = np.asarray(histories)
    embs = T.embedding(model.f_c, h, PAD)
    return nn.encoder_forward(embs, h == PAD, model.cfg_u, model.g_u, training, rng)


def encode_content_history(model: PdtModel, histories, training=False, rng=None) -> Tensor:
    """CLS summary of user histories ``[B, L_c]`` -> ``[B, d_c]``."""
    h = np.asarray(histories)
    embs = _user_vectors(model, h)
    return nn.encoder_forward(embs, h == PAD, model.cfg_c, model.g_c, training, rng)


def last_real_positions(histories: np.ndarray) -> np.ndarray:
    h = np.asarray(histories)
    real = h != PAD
    if not real.any(axis=1).all():
        raise ContractError("decode_next: a history row contains only padding")
    return h.shape[1] - 1 - np.argmax(real[:, ::-1], axis=1)


def decode_sequence(model: PdtModel, histories, training=False, rng=None) -> Tensor:
    h = np.asarray(histories)
    if not (h != PAD).any(axis=1).all():
        raise ContractError("decode_next: a history row contains only padding")
    embs = T.embedding(model.f_c, h, PAD)
    return nn.encoder_forward(embs, h == PAD, model.cfg_r, model.g_r, training, rng)


def decode_next(model: PdtModel, histories, training=False, rng=None) -> Tensor:
    """Causal decoder output at each row's last real token -> ``[B, d_c]``."""
    h = np.asarray(histories)
    last = last_real_positions(h)
    seq = decode_sequence(model, h, training, rng)
    return seq[np.arange(len(h)), last]


def info_nce(anchors: Tensor, context: Tensor, cfg: LossConfig, ids=None) -> Tensor:
    """In-batch contrastive loss.

    Row i scores context_i against every anchor_k with ``anchor_k . context_i / tau``;
    the matching anchor k=i is the positive.  ``standard`` keeps the positive
    in the denominator; ``exclude_positive`` drops it.
    """
    B = anchors.shape[0]
    if B < 2:
        raise ContractError(f"info_nce needs at least 2 rows, got {B}")
    if anchors.shape != context.shape:
        raise DimensionError(f"anchors {list(anchors.shape)} vs context {list(context.shape)}")
    if ids is not None and len(np.unique(ids)) < len(ids):
        warnings.warn("duplicate anchor ids in batch act as false negatives", DuplicateAnchorWarning, stacklevel=2)
    logits = (context @ T.swap_last(anchors)) * (1.0 / cfg.temperature)
    eye = np.eye(B, dtype=bool)
    positive = T.tsum(T.masked_fill(logits, ~eye, 0.0), axis=1)
    denom = logits if cfg.denominator_mode == "standard" else T.masked_fill(logits, eye, -np.inf)
    return T.mean(T.logsumexp(denom, axis=1) - positive)


def bpr_loss(y: Tensor, pos_emb: Tensor, neg_emb: Tensor, cfg: LossConfig, weights=None) -> Tensor:
    """Pairwise ranking loss between a positive and a sampled negative item."""
    if not (y.shape == pos_emb.shape == neg_emb.shape):
        raise DimensionError(f"bpr_loss shapes {list(y.shape)}, {list(pos_emb.shape)}, {list(neg_emb.shape)}")
    sp = T.tsum(y * pos_emb, axis=-1)
    sn = T.tsum(y * neg_emb, axis=-1)
    if cfg.bpr_mode == "standard":
        per = -T.log_sigmoid(sp - sn)
    else:
        per = -T.log(T.clamp_min(T.sigmoid(sp) - T.sigmoid(sn), 1e-12))
    if weights is None:
        return T.mean(per)
    w = np.asarray(weights, dtype=per.dtype)
    return T.tsum(per * T.Tensor(w / w.sum(), dtype=per.dtype.type))


def pretrain_loss(model: PdtModel, batch: PretrainBatch, cfg: LossConfig, training=False, rng=None,
                  use_u: bool = True, use_c: bool = True) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """Return ``(L_u, L_c)``; a disabled side is ``None``."""
    if len(batch) < 2:
        raise ContractError("pretrain_loss needs a batch of at least 2 edges")
    l_u = l_c = None
    if use_u:
        ctx = encode_user_history(model, batch.user_histories, training, rng)
        l_u = info_nce(_user_vectors(model, batch.user_ids), ctx, cfg, batch.user_ids)
    if use_c:
        ctx = encode_content_history(model, batch.content_histories, training, rng)
        l_c = info_nce(T.embedding(model.f_c, batch.content_ids, PAD), ctx, cfg, batch.content_ids)
    return l_u, l_c


def recommendation_loss(model: PdtModel, batch: FinetuneBatch, cfg: LossConfig, training=False, rng=None) -> Tensor:
    if batch.position_targets is None:
        y = decode_next(model, batch.histories, training, rng)
        return bpr_loss(y, T.embedding(model.f_c, batch.positives, PAD),
                        T.embedding(model.f_c, batch.negatives, PAD), cfg)
    seq = decode_sequence(model, batch.histories, training, rng)
    rows, cols = np.nonzero(batch.position_targets != PAD)
    y = seq[rows, cols]
    return bpr_loss(y, T.embedding(model.f_c, batch.position_targets[rows, cols], PAD),
                    T.embedding(model.f_c, batch.position_negatives[rows, cols], PAD), cfg)


def total_loss(model: PdtModel, finetune_batch: FinetuneBatch, pretrain_batch: Optional[PretrainBatch],
               cfg: LossConfig, training=False, rng=None) -> Tuple[Tensor, Dict[str, Optional[Tensor]]]:
    """``L_BPR + lambda_u * L_u + lambda_c * L_c``; zero-weight terms are not computed."""
    l_bpr = recommendation_loss(model, finetune_batch, cfg, training, rng)
    use_u, use_c = cfg.lambda_u > 0, cfg.lambda_c > 0
    l_u = l_c = None
    total = l_bpr
    if use_u or use_c:
        if pretrain_batch is None:
            raise ContractError("total_loss with nonzero lambda needs a pretrain batch")
        l_u, l_c = pretrain_loss(model, pretrain_batch, cfg, training, rng, use_u, use_c)
        if l_u is not None:
            total = total + cfg.lambda_u * l_u
        if l_c is not None:
            total = total + cfg.lambda_c * l_c
    return total, {"L_bpr": l_bpr, "L_u": l_u, "L_c": l_c}


def score_items(model: PdtModel, y: Tensor, item_ids) -> Tensor:
    """Inner products of ``y`` with the selected item embeddings -> ``[B, n]``."""
    ids = np.asarray(item_ids)
    if np.any(ids == PAD):
        raise ContractError("score_items: the padding id 0 is not an item")
    rows = T.embedding(model.f_c, ids, None)
    return y @ T.swap_last(rows)
