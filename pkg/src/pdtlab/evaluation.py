"""Ranking protocols and Recall@K / NDCG@K for single held-out targets."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import PAD, BipartiteDataset, Split, sample_negatives
from .errors import ConfigError, ContractError
from .model import PdtModel, decode_next, score_items


@dataclass(frozen=True)
class EvalProtocol:
    mode: str = "full_rank"
    n_negatives: int = 10000
    exclude_seen: bool = True
    ks: Tuple[int, ...] = (5, 10, 20)
    history_len: int = 8
    batch_size: int = 1024

    def __post_init__(self):
        if self.mode not in ("full_rank", "sampled"):
            raise ConfigError(f"unknown evaluation mode {self.mode!r}")
        ks = tuple(int(k) for k in self.ks)
        if not ks or list(ks) != sorted(ks) or ks[0] < 1:
            raise ConfigError(f"Ks must be positive and ascending, got {ks}")
        object.__setattr__(self, "ks", ks)
        if self.mode == "sampled" and self.n_negatives < ks[-1]:
            raise ConfigError(f"n_negatives={self.n_negatives} smaller than max K={ks[-1]}")


@dataclass
class MetricsReport:
    recall: Dict[int, float]
    ndcg: Dict[int, float]
    n_users: int
    n_skipped: int = 0
    protocol: Dict = field(default_factory=dict)
    split: str = "val"
    checkpoint_id: Optional[str] = None

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        d["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: Dict) -> "MetricsReport":
        d = dict(d)
        d["recall"] = {int(k): v for k, v in d["recall"].items()}
        d["ndcg"] = {int(k): v for k, v in d["ndcg"].items()}
        return cls(**d)

    def csv_rows(self) -> List[List]:
        proto = self.protocol.get("mode", "")
        return [[self.checkpoint_id or "", proto, k, self.recall[k], self.ndcg[k]] for k in sorted(self.recall)]


CSV_HEADER = ["checkpoint", "protocol", "K", "recall", "ndcg"]


def reports_to_csv(reports: Sequence[MetricsReport], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_HEADER)
    for r in reports:
        w.writerows(r.csv_rows())
    return buf.getvalue()


def recall_at_k(rank: int, k: int) -> int:
    if rank < 1:
        raise ContractError(f"rank must be >= 1, got {rank}")
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1:
        raise ContractError(f"rank must be >= 1, got {rank}")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def pessimistic_rank(candidate_scores: np.ndarray, target_score: float) -> int:
    """1 + number of other candidates scoring at least as high as the target.

    ``candidate_scores`` must not include the target itself.
    """
    return 1 + int(np.count_nonzero(candidate_scores >= target_score))


def rank_of_target(model: PdtModel, history, target: int, candidate_items) -> int:
    """Rank of ``target`` among ``candidate_items`` under the decoder's scores."""
    cands = np.asarray(candidate_items, dtype=np.int64)
    hits = np.flatnonzero(cands == target)
    if len(hits) == 0:
        raise ContractError(f"target {target} is not among the candidates")
    h = np.asarray(history, dtype=np.int64).reshape(1, -1)
    if not (h != PAD).any():
        raise ContractError("rank_of_target: empty history")
    with T.no_grad():
        y = decode_next(model, h)
        s = score_items(model, y, cands).data[0]
    others = np.delete(s, hits[0])
    return pessimistic_rank(others, s[hits[0]])


@dataclass
class EvalCase:
    user: int
    edge: int
    target: int
    history: np.ndarray  # full chronological item list before the target


def evaluation_cases(ds: BipartiteDataset, split: Split, which: str) -> Tuple[List[EvalCase], int]:
    """Targets of ``which`` with their allowed prior histories; also counts skipped users."""
    if which not in ("val", "test"):
        raise ConfigError(f"which must be 'val' or 'test', got {which!r}")
    parts = ("train",) if which == "val" else ("train", "val")
    allowed = split.mask(*parts, n_edges=ds.n_edges)
    cases, skipped = [], 0
    for e in getattr(split, which):
        u = int(ds.edge_user[e])
        edges = ds.user_edges[u]
        prior = edges[(edges < e) & allowed[edges]]
        if len(prior) == 0:
            skipped += 1
            continue
        cases.append(EvalCase(u, int(e), int(ds.edge_item[e]), ds.edge_item[prior]))
    return cases, skipped


def case_ranks(model: PdtModel, ds: BipartiteDataset, split: Split, cases: Sequence[EvalCase],
               protocol: EvalProtocol, rng: Optional[np.random.Generator]) -> np.ndarray:
    L = protocol.history_len
    ranks = np.empty(len(cases), dtype=np.int64)
    table = model.f_c.data[1:]
    for start in range(0, len(cases), protocol.batch_size):
        chunk = cases[start:start + protocol.batch_size]
        hist = np.zeros((len(chunk), L), dtype=np.int64)
        for r, c in enumerate(chunk):
            tail = c.history[-L:]
            hist[r, L - len(tail):] = tail
        with T.no_grad():
            y = decode_next(model, hist).data
        scores = y @ table.T
        for r, c in enumerate(chunk):
            s = scores[r]
            st = s[c.target - 1]
            if protocol.mode == "full_rank":
                keep = np.ones(ds.n_items, dtype=bool)
                if protocol.exclude_seen:
                    keep[c.history - 1] = False
                keep[c.target - 1] = False
                ranks[start + r] = pessimistic_rank(s[keep], st)
            else:
                if rng is None:
                    raise ContractError("sampled evaluation needs an rng")
                negs = sample_negatives(ds, c.user, protocol.n_negatives, rng, scope="all", split=split)
                ranks[start + r] = pessimistic_rank(s[negs - 1], st)
    return ranks


def metrics_from_ranks(ranks: Sequence[int], ks: Sequence[int]) -> Tuple[Dict[int, float], Dict[int, float]]:
    n = len(ranks)
    recall, ndcg = {}, {}
    for k in ks:
        if n == 0:
            recall[k] = ndcg[k] = 0.0
            continue
        recall[k] = math.fsum(recall_at_k(int(r), k) for r in ranks) / n
        ndcg[k] = math.fsum(ndcg_at_k(int(r), k) for r in ranks) / n
    return recall, ndcg


def evaluate(model: PdtModel, ds: BipartiteDataset, split: Split, which: str = "val",
             protocol: Optional[EvalProtocol] = None, rng: Optional[np.random.Generator] = None,
             checkpoint_id: Optional[str] = None) -> MetricsReport:
    """Rank every held-out target of ``which`` and average Recall@K / NDCG@K.

    Validation histories use train edges; test histories use train and
    validation edges.  Users without any prior edge are skipped and counted.
    """
    protocol = protocol or EvalProtocol()
    cases, skipped = evaluation_cases(ds, split, which)
    ranks = case_ranks(model, ds, split, cases, protocol, rng)
    recall, ndcg = metrics_from_ranks(ranks, protocol.ks)
    return MetricsReport(recall, ndcg, len(cases), skipped, asdict(protocol), which, checkpoint_id)


def select_model(reports: Sequence[MetricsReport], k: int = 10) -> Optional[str]:
    """Checkpoint id with the highest Recall@k; the earliest one wins ties."""
    if not reports:
        raise ContractError("select_model needs at least one report")
    best = max(range(len(reports)), key=lambda i: (reports[i].recall[k], -i))
    return reports[best].checkpoint_id
