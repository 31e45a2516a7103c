"""Pre-training, fine-tuning and the ablation grid."""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .data import (BipartiteDataset, Split, finetune_anchors, finetune_batch_for, make_pretrain_batch,
                   pretrain_anchors, pretrain_batch_for)
from .errors import ConfigError, ContractError, DataError, NumericError
from .evaluation import EvalProtocol, MetricsReport, evaluate
from .model import DuplicateAnchorWarning, LossConfig, PdtModel, pretrain_loss, total_loss

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_Lu", "no_Lc", "no_both")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    pretrain_epochs: int = 2
    finetune_epochs: int = 30
    batch_size: int = 1024
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hist_user: int = 9
    hist_content: int = 9
    hist_finetune: int = 8
    d_user: int = 128
    d_content: int = 128
    num_layers: int = 2
    num_heads: int = 2
    d_ff: int = 256
    dropout: float = 0.2
    attention_dropout: bool = False
    lambda_u: float = 0.01
    lambda_c: float = 0.01
    temperature: float = 0.5
    denominator_mode: str = "standard"
    bpr_mode: str = "standard"
    ablation: str = "full"
    seed: int = 0
    min_hist: int = 1
    eval_every: int = 1
    eval_mode: str = "full_rank"
    eval_negatives: int = 10000
    eval_exclude_seen: bool = True
    eval_ks: Tuple[int, ...] = (5, 10, 20)
    clip_norm: float = 0.0
    per_position: bool = False
    log_wall_time: bool = True
    dtype: str = "float32"
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        self.eval_ks = tuple(int(k) for k in self.eval_ks)
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        for name in ("pretrain_epochs", "finetune_epochs", "batch_size", "hist_user", "hist_content",
                     "hist_finetune", "d_user", "d_content", "num_layers", "num_heads", "d_ff", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for in-batch contrastive losses")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.min_hist < 0:
            raise ConfigError("min_hist must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if 10 not in self.eval_ks:
            raise ConfigError("eval_ks must include 10 (model selection uses Recall@10)")
        self.loss_config()
        self.protocol()

    @property
    def max_len(self) -> int:
        return max(self.hist_user, self.hist_content, self.hist_finetune)

    def loss_config(self, lambda_u=None, lambda_c=None) -> LossConfig:
        return LossConfig(self.lambda_u if lambda_u is None else lambda_u,
                          self.lambda_c if lambda_c is None else lambda_c,
                          self.temperature, self.denominator_mode, self.bpr_mode)

    def protocol(self) -> EvalProtocol:
        return EvalProtocol(self.eval_mode, self.eval_negatives, self.eval_exclude_seen, self.eval_ks,
                            self.hist_finetune)

    def uses(self) -> Tuple[bool, bool]:
        """Whether the user-side and content-side contrastive losses are active."""
        return self.ablation in ("full", "no_Lc"), self.ablation in ("full", "no_Lu")

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["eval_ks"] = list(self.eval_ks)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def build_model(cfg: TrainConfig, n_users: int, n_items: int, rng: np.random.Generator) -> PdtModel:
    with T.precision(np.dtype(cfg.dtype).type):
        return PdtModel.create(n_users, n_items, cfg.d_user, cfg.d_content, num_layers=cfg.num_layers,
                               num_heads=cfg.num_heads, d_ff=cfg.d_ff, dropout_p=cfg.dropout,
                               max_len=cfg.max_len, attention_dropout=cfg.attention_dropout, rng=rng)


def model_from_checkpoint(ckpt: Checkpoint, which: str = "params") -> PdtModel:
    """Rebuild a model from ``ckpt.params`` or, with ``which='best'``, ``ckpt.best_params``."""
    cfg = TrainConfig.from_dict(ckpt.config)
    state = ckpt.params if which == "params" else ckpt.best_params
    if not state:
        raise ContractError(f"checkpoint has no {which!r} tensors")
    model = build_model(cfg, state["f_u"].shape[0] - 1, state["f_c"].shape[0] - 1, np.random.default_rng(0))
    model.load_state_dict(state)
    return model


class StepLog:
    """JSON-lines training log; kept in memory and optionally appended to a file."""

    def __init__(self, path=None, wall_time: bool = True):
        self.path = Path(path) if path else None
        self.wall_time = wall_time
        self.records: List[Dict] = []
        self._t0 = time.perf_counter()

    def write(self, phase, epoch, step, l_u, l_c, l_bpr, total) -> None:
        rec = {
            "phase": phase, "epoch": epoch, "step": step,
            "L_u": _f(l_u), "L_c": _f(l_c), "L_bpr": _f(l_bpr), "total": _f(total),
            "wall_ms": round((time.perf_counter() - self._t0) * 1000.0, 3) if self.wall_time else None,
        }
        self.records.append(rec)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _f(t) -> Optional[float]:
    return None if t is None else float(t.data)


def _chunks(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def _optimizer_step(model: PdtModel, loss, state: nn.AdamState, cfg: TrainConfig, step: int) -> None:
    if not math.isfinite(float(loss.data)):
        raise NumericError(f"non-finite loss at step {step}", step=step)
    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    T.backward(loss)
    grads = {k: p.grad for k, p in params.items()}
    if cfg.clip_norm > 0:
        nn.clip_grad_norm(grads, cfg.clip_norm)
    try:
        nn.adam_step(params, grads, state)
    except NumericError as exc:
        raise NumericError(f"{exc} (training step {step})", step=step) from exc
    for p in params.values():
        p.grad = None


def _adam(cfg: TrainConfig) -> nn.AdamState:
    return nn.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)


def pretrain(ds: BipartiteDataset, split: Split, cfg: TrainConfig, log_path=None,
             step_log: Optional[StepLog] = None) -> Checkpoint:
    """Optimize the contrastive objective(s) selected by ``cfg.ablation``."""
    if cfg.ablation == "no_both":
        raise ConfigError("ablation no_both skips pre-training entirely")
    cfg = replace(cfg, phase="pretrain")
    use_u, use_c = cfg.uses()
    step_log = step_log or StepLog(log_path, cfg.log_wall_time)
    rng = np.random.default_rng(cfg.seed)
    loss_cfg = cfg.loss_config()
    anchors = pretrain_anchors(ds, split, cfg.min_hist)
    if len(anchors) < 2:
        raise DataError(f"only {len(anchors)} train edges have histories of at least min_hist={cfg.min_hist}")
    dtype = np.dtype(cfg.dtype).type
    model = build_model(cfg, ds.n_users, ds.n_items, rng)
    state = _adam(cfg)
    step = 0
    with T.precision(dtype), warnings.catch_warnings():
        warnings.simplefilter("ignore", DuplicateAnchorWarning)
        for epoch in range(1, cfg.pretrain_epochs + 1):
            for chunk in _chunks(rng.permutation(anchors), cfg.batch_size):
                if len(chunk) < 2:
                    continue
                batch = pretrain_batch_for(ds, split, chunk, cfg.hist_user, cfg.hist_content)
                l_u, l_c = pretrain_loss(model, batch, loss_cfg, True, rng, use_u, use_c)
                loss = l_u if l_c is None else (l_c if l_u is None else l_u + l_c)
                step += 1
                _optimizer_step(model, loss, state, cfg, step)
                step_log.write("pretrain", epoch, step, l_u, l_c, None, loss)
            log.info("pretrain epoch %d done (step %d)", epoch, step)
    return Checkpoint(
        config=cfg.to_dict(), params=model.state_dict(), phase="pretrain",
        epoch=cfg.pretrain_epochs, step=step, adam_t=state.t,
        adam_m={k: v.copy() for k, v in state.m.items()}, adam_v={k: v.copy() for k, v in state.v.items()},
        rng_state=rng.bit_generator.state,
    )


@dataclass
class FinetuneResult:
    last: Checkpoint
    best: Checkpoint
    reports: List[MetricsReport] = field(default_factory=list)


def _paired_pretrain_batch(ds, split, chunk, cfg: TrainConfig, rng):
    qualified = pretrain_anchors(ds, split, cfg.min_hist)
    same = chunk[np.isin(chunk, qualified)]
    if len(same) >= 2:
        return pretrain_batch_for(ds, split, same, cfg.hist_user, cfg.hist_content)
    return make_pretrain_batch(ds, split, max(2, len(chunk)), cfg.hist_user, cfg.hist_content, rng, cfg.min_hist)


def finetune(ds: BipartiteDataset, split: Split, cfg: TrainConfig, init: Optional[Checkpoint] = None,
             log_path=None, stop_after_epoch: Optional[int] = None,
             step_log: Optional[StepLog] = None) -> FinetuneResult:
    """Optimize BPR plus the weighted contrastive terms; keep the best validation epoch.

    ``init`` is a pre-training checkpoint (fresh optimizer) or a fine-tuning
    checkpoint to resume from.  Ablation ``no_both`` starts from scratch.
    ``stop_after_epoch`` ends the run early, e.g. to test resumption.
    """
    cfg = replace(cfg, phase="finetune")
    resume = init is not None and init.phase == "finetune"
    if init is None and cfg.ablation != "no_both":
        raise ContractError(f"ablation {cfg.ablation} fine-tuning needs a pre-training checkpoint")
    if cfg.ablation == "no_both" and init is not None and not resume:
        raise ConfigError("ablation no_both must not start from a pre-training checkpoint")
    use_u, use_c = cfg.uses()
    loss_cfg = cfg.loss_config(cfg.lambda_u if use_u else 0.0, cfg.lambda_c if use_c else 0.0)
    need_pre = loss_cfg.lambda_u > 0 or loss_cfg.lambda_c > 0
    step_log = step_log or StepLog(log_path, cfg.log_wall_time)
    dtype = np.dtype(cfg.dtype).type

    rng = np.random.default_rng([cfg.seed, 1])
    state = _adam(cfg)
    best_val, best_epoch, best_params = None, None, {}
    start_epoch, step = 0, 0
    val_history: List[float] = []
    if resume:
        rng.bit_generator.state = init.rng_state
        state.t, state.m, state.v = init.adam_t, {k: v.copy() for k, v in init.adam_m.items()}, \
            {k: v.copy() for k, v in init.adam_v.items()}
        best_val, best_epoch = init.best_val, init.best_epoch
        best_params = {k: v.copy() for k, v in init.best_params.items()}
        start_epoch, step = init.epoch, init.step
        val_history = list(init.extra.get("val_history", []))
        model = model_from_checkpoint(init)
    elif init is not None:
        model = model_from_checkpoint(init)
    else:
        model = build_model(cfg, ds.n_users, ds.n_items, rng)

    anchors = finetune_anchors(ds, split)
    if len(anchors) == 0:
        raise DataError("no train edge has a nonempty prior user history")
    protocol = cfg.protocol()
    reports: List[MetricsReport] = []
    epoch = start_epoch
    with T.precision(dtype), warnings.catch_warnings():
        warnings.simplefilter("ignore", DuplicateAnchorWarning)
        for epoch in range(start_epoch + 1, cfg.finetune_epochs + 1):
            for chunk in _chunks(rng.permutation(anchors), cfg.batch_size):
                fb = finetune_batch_for(ds, split, chunk, cfg.hist_finetune, rng, cfg.per_position)
                pb = _paired_pretrain_batch(ds, split, chunk, cfg, rng) if need_pre else None
                loss, parts = total_loss(model, fb, pb, loss_cfg, True, rng)
                step += 1
                _optimizer_step(model, loss, state, cfg, step)
                step_log.write("finetune", epoch, step, parts["L_u"], parts["L_c"], parts["L_bpr"], loss)
            if epoch % cfg.eval_every == 0 or epoch == cfg.finetune_epochs:
                report = evaluate(model, ds, split, "val", protocol, eval_rng(cfg, epoch), f"epoch-{epoch}")
                reports.append(report)
                r10 = report.recall[10]
                val_history.append(r10)
                log.info("finetune epoch %d val Recall@10 %.4f", epoch, r10)
                if best_val is None or r10 > best_val:
                    best_val, best_epoch, best_params = r10, epoch, model.state_dict()
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break

    last = Checkpoint(
        config=cfg.to_dict(), params=model.state_dict(), phase="finetune", epoch=epoch, step=step,
        adam_t=state.t, adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()}, rng_state=rng.bit_generator.state,
        best_val=best_val, best_epoch=best_epoch, best_params=best_params,
        extra={"val_history": val_history},
    )
    best = Checkpoint(config=cfg.to_dict(), params=best_params or model.state_dict(), phase="finetune",
                      epoch=best_epoch or epoch, step=step, best_val=best_val, best_epoch=best_epoch)
    if cfg.checkpoint_dir:
        out = Path(cfg.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(last, out / "finetune-last.pdtc")
        save_checkpoint(best, out / "finetune-best.pdtc")
    return FinetuneResult(last, best, reports)


def eval_rng(cfg: TrainConfig, epoch: int) -> np.random.Generator:
    """Generator used for validation at ``epoch``; independent of the training stream."""
    return np.random.default_rng([cfg.seed, 2, epoch])


@dataclass
class AblationRun:
    variant: str
    seed: int
    report: MetricsReport
    best_val: Optional[float]


def run_variant(ds: BipartiteDataset, split: Split, cfg: TrainConfig, variant: str, seed: int,
                log_path=None) -> AblationRun:
    """Pre-train (unless ``no_both``), fine-tune, and score the best-val model on test."""
    vcfg = replace(cfg, ablation=variant, seed=seed)
    step_log = StepLog(log_path, cfg.log_wall_time)
    init = None
    if variant != "no_both":
        init = pretrain(ds, split, vcfg, step_log=step_log)
    res = finetune(ds, split, vcfg, init=init, step_log=step_log)
    model = model_from_checkpoint(res.best)
    proto = vcfg.protocol()
    report = evaluate(model, ds, split, "test", proto, np.random.default_rng([seed, 3]),
                      checkpoint_id=f"{variant}-seed{seed}")
    return AblationRun(variant, seed, report, res.best.best_val)


def mean_report(runs: Sequence[AblationRun], checkpoint_id: str) -> MetricsReport:
    ks = sorted(runs[0].report.recall)
    recall = {k: math.fsum(r.report.recall[k] for r in runs) / len(runs) for k in ks}
    ndcg = {k: math.fsum(r.report.ndcg[k] for r in runs) / len(runs) for k in ks}
    first = runs[0].report
    return MetricsReport(recall, ndcg, first.n_users, first.n_skipped, first.protocol, "test", checkpoint_id)


def ablate(ds: BipartiteDataset, split: Split, cfg: TrainConfig, variants: Sequence[str] = ABLATIONS,
           seeds: Sequence[int] = (0,), log_path=None) -> Dict[str, MetricsReport]:
    """Seed-averaged test metrics for each ablation variant."""
    out = {}
    for v in variants:
        if v not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {v!r}")
        runs = [run_variant(ds, split, cfg, v, s, log_path) for s in seeds]
        out[v] = mean_report(runs, v)
    return out
