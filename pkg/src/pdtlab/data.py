"""Interaction logs, the temporal bipartite graph, splits, histories and batches.

Edges are stored sorted by (timestamp, original file order); an edge's id is
its position in that order.  Because of this, "chronologically before edge e"
is simply "edge id < e" for every per-user and per-item list, and timestamp
ties resolve by file order.

Index 0 is the padding index in both vocabularies; real users and items are
numbered from 1 in order of first appearance.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatVersionError, IntegrityError

log = logging.getLogger(__name__)

PAD = 0
CACHE_MAGIC = b"PDTD"
CACHE_VERSION = 1


@dataclass(frozen=True)
class InteractionRecord:
    user_key: str
    item_key: str
    timestamp: int
    rating: Optional[float] = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class FormatSpec:
    """How to read an interaction file.

    ``columns`` names the role of each field in file order; roles are
    ``user``, ``item``, ``timestamp``, ``rating`` and ``skip``.
    """

    delimiter: str = "\t"
    columns: Sequence[str] = ("user", "item", "timestamp", "rating")
    comment: str = "#"
    header: bool = False
    strict: bool = False
    max_malformed_fraction: float = 0.1

    def __post_init__(self):
        roles = list(self.columns)
        for need in ("user", "item", "timestamp"):
            if roles.count(need) != 1:
                raise ConfigError(f"format columns must name '{need}' exactly once: {roles}")
        unknown = set(roles) - {"user", "item", "timestamp", "rating", "skip"}
        if unknown:
            raise ConfigError(f"unknown column roles {sorted(unknown)}")


class RecordList(list):
    """A list of records that also remembers how many lines were malformed."""

    def __init__(self, records=(), malformed: int = 0):
        super().__init__(records)
        self.malformed = malformed


def _parse_line(parts: List[str], fmt: FormatSpec) -> InteractionRecord:
    roles = list(fmt.columns)
    n_required = max(roles.index(r) for r in ("user", "item", "timestamp")) + 1
    if len(parts) < n_required or len(parts) > len(roles):
        raise ValueError(f"expected {n_required}..{len(roles)} fields, got {len(parts)}")
    values = dict(zip(roles, parts))
    user, item = values["user"].strip(), values["item"].strip()
    if not user or not item:
        raise ValueError("empty user or item key")
    ts = int(values["timestamp"])
    rating = values.get("rating")
    rating = float(rating) if rating not in (None, "") else None
    return InteractionRecord(user, item, ts, rating)


def load_interactions(path, fmt: Optional[FormatSpec] = None) -> RecordList:
    """Read interaction records in file order.

    Malformed lines are skipped and counted (``result.malformed``).  With
    ``fmt.strict`` any malformed line raises; otherwise a malformed fraction
    above ``fmt.max_malformed_fraction`` raises :class:`DataError`.
    """
    fmt = fmt or FormatSpec()
    path = Path(path)
    records = []
    malformed = 0
    total = 0
    header_pending = fmt.header
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or (fmt.comment and line.startswith(fmt.comment)):
                continue
            if header_pending:
                header_pending = False
                continue
            total += 1
            try:
                records.append(_parse_line(line.split(fmt.delimiter), fmt))
            except (ValueError, DataError) as exc:
                if fmt.strict:
                    raise DataError(f"{path}:{lineno}: malformed line ({exc})") from exc
                malformed += 1
    if malformed:
        log.warning("%s: skipped %d malformed line(s) of %d", path, malformed, total)
        if malformed / total > fmt.max_malformed_fraction:
            raise DataError(
                f"{path}: {malformed}/{total} malformed lines exceeds "
                f"max_malformed_fraction={fmt.max_malformed_fraction}"
            )
    return RecordList(records, malformed)


def write_interactions(records: Sequence[InteractionRecord], path, fmt: Optional[FormatSpec] = None) -> None:
    fmt = fmt or FormatSpec()
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            values = {
                "user": r.user_key,
                "item": r.item_key,
                "timestamp": str(r.timestamp),
                "rating": "" if r.rating is None else repr(float(r.rating)),
                "skip": "",
            }
            fields = [values[c] for c in fmt.columns]
            while fields and fields[-1] == "" and fmt.columns[len(fields) - 1] in ("rating", "skip"):
                fields.pop()
            fh.write(fmt.delimiter.join(fields) + "\n")


class BipartiteDataset:
    """Users, items and time-ordered interaction edges, with both adjacency views."""

    def __init__(self, user_keys, item_keys, edge_user, edge_item, edge_time, ratings=None):
        self.user_keys: List[Optional[str]] = list(user_keys)
        self.item_keys: List[Optional[str]] = list(item_keys)
        self.user_index: Dict[str, int] = {k: i for i, k in enumerate(self.user_keys) if i}
        self.item_index: Dict[str, int] = {k: i for i, k in enumerate(self.item_keys) if i}
        self.edge_user = np.asarray(edge_user, dtype=np.int64)
        self.edge_item = np.asarray(edge_item, dtype=np.int64)
        self.edge_time = np.asarray(edge_time, dtype=np.int64)
        self.ratings = None if ratings is None else np.asarray(ratings, dtype=np.float64)
        if np.any(np.diff(self.edge_time) < 0):
            raise ContractError("edges must be sorted by timestamp")
        self.user_edges = _group(self.edge_user, self.n_users + 1)
        self.item_edges = _group(self.edge_item, self.n_items + 1)

    @property
    def n_users(self) -> int:
        return len(self.user_keys) - 1

    @property
    def n_items(self) -> int:
        return len(self.item_keys) - 1

    @property
    def n_edges(self) -> int:
        return len(self.edge_user)

    def user_items(self, u: int) -> np.ndarray:
        return self.edge_item[self.user_edges[u]]

    def item_users(self, c: int) -> np.ndarray:
        return self.edge_user[self.item_edges[c]]

    def __repr__(self) -> str:
        return f"BipartiteDataset(users={self.n_users}, items={self.n_items}, edges={self.n_edges})"


def _group(keys: np.ndarray, n: int) -> List[np.ndarray]:
    order = np.argsort(keys, kind="stable")
    bounds = np.searchsorted(keys[order], np.arange(n + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(n)]


def build_dataset(records: Sequence[InteractionRecord]) -> BipartiteDataset:
    """Index records into a :class:`BipartiteDataset`.

    Duplicate (user, item, timestamp) records are kept as separate edges.
    """
    if not records:
        raise DataError("cannot build a dataset from zero records")
    user_keys: List[Optional[str]] = [None]
    item_keys: List[Optional[str]] = [None]
    uidx: Dict[str, int] = {}
    iidx: Dict[str, int] = {}
    n = len(records)
    eu = np.empty(n, dtype=np.int64)
    ei = np.empty(n, dtype=np.int64)
    et = np.empty(n, dtype=np.int64)
    rt = np.full(n, np.nan)
    for k, r in enumerate(records):
        u = uidx.get(r.user_key)
        if u is None:
            u = uidx[r.user_key] = len(user_keys)
            user_keys.append(r.user_key)
        c = iidx.get(r.item_key)
        if c is None:
            c = iidx[r.item_key] = len(item_keys)
            item_keys.append(r.item_key)
        eu[k], ei[k], et[k] = u, c, r.timestamp
        if r.rating is not None:
            rt[k] = r.rating
    order = np.argsort(et, kind="stable")
    ratings = rt[order] if not np.all(np.isnan(rt)) else None
    return BipartiteDataset(user_keys, item_keys, eu[order], ei[order], et[order], ratings)


# -- binary cache ------------------------------------------------------------------

def save_dataset(ds: BipartiteDataset, path) -> None:
    """Write the versioned ``PDTD`` cache (little-endian)."""
    if ds.n_edges and (ds.edge_time.max() > 0xFFFFFFFF):
        raise DataError("timestamps beyond u32 range cannot be cached")
    out = bytearray()
    out += CACHE_MAGIC
    out += struct.pack("<I", CACHE_VERSION)
    for keys in (ds.user_keys, ds.item_keys):
        out += struct.pack("<I", len(keys) - 1)
        for key in keys[1:]:
            raw = key.encode("utf-8")
            out += struct.pack("<I", len(raw)) + raw
    out += struct.pack("<I", ds.n_edges)
    triples = np.stack([ds.edge_user, ds.edge_item, ds.edge_time], axis=1).astype("<u4")
    out += triples.tobytes()
    if ds.ratings is None:
        out += b"\x00"
    else:
        out += b"\x01" + ds.ratings.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_dataset(path) -> BipartiteDataset:
    buf = Path(path).read_bytes()
    if buf[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: not a PDTD dataset cache")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != CACHE_VERSION:
            raise FormatVersionError(
                f"{path}: dataset cache version {version}, this build reads version {CACHE_VERSION}"
            )
        off = 8
        vocabs = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            keys: List[Optional[str]] = [None]
            for _ in range(n):
                (ln,) = struct.unpack_from("<I", buf, off)
                off += 4
                keys.append(buf[off:off + ln].decode("utf-8"))
                off += ln
            vocabs.append(keys)
        (m,) = struct.unpack_from("<I", buf, off)
        off += 4
        triples = np.frombuffer(buf, dtype="<u4", count=3 * m, offset=off).reshape(m, 3).astype(np.int64)
        off += 12 * m
        flag = buf[off]
        off += 1
        ratings = None
        if flag:
            ratings = np.frombuffer(buf, dtype="<f8", count=m, offset=off).copy()
    except (struct.error, ValueError, IndexError) as exc:
        raise IntegrityError(f"{path}: truncated dataset cache") from exc
    return BipartiteDataset(vocabs[0], vocabs[1], triples[:, 0], triples[:, 1], triples[:, 2], ratings)


# -- splits -----------------------------------------------------------------------

@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    mode: str
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def mask(self, *parts: str, n_edges: int) -> np.ndarray:
        m = np.zeros(n_edges, dtype=bool)
        for p in parts:
            m[getattr(self, p)] = True
        return m


def _prune_cold(ds: BipartiteDataset, train: np.ndarray, held: np.ndarray) -> np.ndarray:
    known = np.zeros(ds.n_items + 1, dtype=bool)
    known[ds.edge_item[train]] = True
    return held[known[ds.edge_item[held]]]


def split_leave_one_out(ds: BipartiteDataset) -> Split:
    """Per user: last edge to test, second-last to val, the rest to train.

    Users with fewer than three edges go entirely to train.  Val/test edges
    whose item never occurs in train are dropped.
    """
    train, val, test = [], [], []
    for u in range(1, ds.n_users + 1):
        edges = ds.user_edges[u]
        if len(edges) < 3:
            train.append(edges)
            continue
        train.append(edges[:-2])
        val.append(edges[-2:-1])
        test.append(edges[-1:])
    cat = lambda xs: np.sort(np.concatenate(xs)) if xs else np.empty(0, dtype=np.int64)  # noqa: E731
    tr = cat(train)
    return Split(tr, _prune_cold(ds, tr, cat(val)), _prune_cold(ds, tr, cat(test)), "leave-one-out")


def split_by_time(ds: BipartiteDataset, fractions=(0.8, 0.1, 0.1)) -> Split:
    """Cut the time-ordered edge list at cumulative fractions.

    Equal timestamps are ordered by original file order.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = ds.n_edges
    a = int(math.floor(fractions[0] * n + 1e-9))
    b = int(math.floor((fractions[0] + fractions[1]) * n + 1e-9))
    if fractions[2] == 0:
        b = n
    ids = np.arange(n)
    tr = ids[:a]
    return Split(tr, _prune_cold(ds, tr, ids[a:b]), _prune_cold(ds, tr, ids[b:]), "time-fraction")


# -- histories ---------------------------------------------------------------------

def _history(ds, entity_edges, other, before_t, exclude_edge, L, allowed) -> np.ndarray:
    edges = entity_edges
    if allowed is not None:
        edges = edges[allowed[edges]]
    t = ds.edge_time[edges]
    keep = t < before_t
    if exclude_edge is not None:
        keep |= (t == before_t) & (edges < exclude_edge)
        keep &= edges != exclude_edge
    picked = other[edges[keep]][-L:] if L > 0 else other[:0]
    out = np.zeros(L, dtype=np.int64)
    if len(picked):
        out[L - len(picked):] = picked
    return out


def user_history(ds, u, before_t, exclude_edge=None, L=9, allowed=None) -> np.ndarray:
    """Items of user ``u`` strictly before ``before_t``, most recent last, left-padded.

    With ``exclude_edge`` given, same-timestamp edges that precede it in file
    order also count as earlier; the edge itself never appears.  ``allowed``
    is an optional boolean mask over edges (e.g. the train split).
    """
    return _history(ds, ds.user_edges[u], ds.edge_item, before_t, exclude_edge, L, allowed)


def content_history(ds, c, before_t, exclude_edge=None, L=9, allowed=None) -> np.ndarray:
    """Users of item ``c`` strictly before ``before_t``; mirror of :func:`user_history`."""
    return _history(ds, ds.item_edges[c], ds.edge_user, before_t, exclude_edge, L, allowed)


class HistoryIndex:
    """Per-entity edge lists restricted to an edge mask, for fast batch assembly."""

    def __init__(self, ds: BipartiteDataset, allowed: np.ndarray):
        self.ds = ds
        self.user_edges = [e[allowed[e]] for e in ds.user_edges]
        self.item_edges = [e[allowed[e]] for e in ds.item_edges]

    def _fill(self, lists, other, owners, anchors, L):
        out = np.zeros((len(anchors), L), dtype=np.int64)
        counts = np.zeros(len(anchors), dtype=np.int64)
        for r, (o, e) in enumerate(zip(owners, anchors)):
            lst = lists[o]
            k = int(np.searchsorted(lst, e))
            counts[r] = k
            if L and k:
                picked = other[lst[max(0, k - L):k]]
                out[r, L - len(picked):] = picked
        return out, counts

    def user_histories(self, anchors: np.ndarray, L: int):
        return self._fill(self.user_edges, self.ds.edge_item, self.ds.edge_user[anchors], anchors, L)

    def content_histories(self, anchors: np.ndarray, L: int):
        return self._fill(self.item_edges, self.ds.edge_user, self.ds.edge_item[anchors], anchors, L)

    def prior_counts(self, anchors: np.ndarray):
        ds = self.ds
        cu = np.array([np.searchsorted(self.user_edges[u], e) for u, e in zip(ds.edge_user[anchors], anchors)], dtype=np.int64)
        cc = np.array([np.searchsorted(self.item_edges[c], e) for c, e in zip(ds.edge_item[anchors], anchors)], dtype=np.int64)
        return cu, cc


def history_index(ds: BipartiteDataset, split: Split, parts=("train",)) -> HistoryIndex:
    key = ("hist", tuple(parts))
    idx = split.cache.get(key)
    if idx is None:
        idx = split.cache[key] = HistoryIndex(ds, split.mask(*parts, n_edges=ds.n_edges))
    return idx


# -- batches -------------------------------------------------------------------------

@dataclass
class PretrainBatch:
    edges: np.ndarray
    user_ids: np.ndarray
    user_histories: np.ndarray
    content_ids: np.ndarray
    content_histories: np.ndarray

    def __len__(self) -> int:
        return len(self.edges)


@dataclass
class FinetuneBatch:
    edges: np.ndarray
    user_ids: np.ndarray
    histories: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    # per-position training: targets/negatives aligned with history slots, 0 = no target
    position_targets: Optional[np.ndarray] = None
    position_negatives: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.edges)


def pretrain_anchors(ds: BipartiteDataset, split: Split, min_hist: int = 1) -> np.ndarray:
    """Train edges whose user and content histories both hold at least ``min_hist`` entries."""
    key = ("pretrain_anchors", min_hist)
    if key not in split.cache:
        idx = history_index(ds, split)
        cu, cc = idx.prior_counts(split.train)
        split.cache[key] = split.train[(cu >= min_hist) & (cc >= min_hist)]
    return split.cache[key]


def finetune_anchors(ds: BipartiteDataset, split: Split) -> np.ndarray:
    """Train edges with a nonempty prior user history."""
    key = ("finetune_anchors",)
    if key not in split.cache:
        idx = history_index(ds, split)
        cu, _ = idx.prior_counts(split.train)
        split.cache[key] = split.train[cu >= 1]
    return split.cache[key]


def pretrain_batch_for(ds: BipartiteDataset, split: Split, edges: np.ndarray, L_u: int, L_c: int) -> PretrainBatch:
    idx = history_index(ds, split)
    edges = np.asarray(edges, dtype=np.int64)
    uh, _ = idx.user_histories(edges, L_u)
    ch, _ = idx.content_histories(edges, L_c)
    return PretrainBatch(edges, ds.edge_user[edges], uh, ds.edge_item[edges], ch)


def make_pretrain_batch(ds, split, B, L_u, L_c, rng, min_hist: int = 1) -> PretrainBatch:
    """Sample ``B`` qualifying train edges and attach their histories."""
    anchors = pretrain_anchors(ds, split, min_hist)
    if len(anchors) == 0:
        raise DataError(f"no train edge has user and content histories of at least min_hist={min_hist}")
    picked = rng.choice(anchors, size=B, replace=len(anchors) < B)
    return pretrain_batch_for(ds, split, picked, L_u, L_c)


def finetune_batch_for(ds, split, edges, L, rng, per_position: bool = False) -> FinetuneBatch:
    idx = history_index(ds, split)
    edges = np.asarray(edges, dtype=np.int64)
    users = ds.edge_user[edges]
    pos = ds.edge_item[edges]
    if not per_position:
        hist, _ = idx.user_histories(edges, L)
        neg = np.array([sample_negatives(ds, u, 1, rng, scope="train", split=split)[0] for u in users], dtype=np.int64)
        return FinetuneBatch(edges, users, hist, pos, neg)
    hist, _ = idx.user_histories(edges, L)
    seq = np.concatenate([hist, pos[:, None]], axis=1)
    targets = seq[:, 1:].copy()
    targets[hist == PAD] = PAD
    negs = np.zeros_like(targets)
    for r, u in enumerate(users):
        n = int((targets[r] != PAD).sum())
        if n:
            negs[r, targets[r] != PAD] = [sample_negatives(ds, u, 1, rng, scope="train", split=split)[0] for _ in range(n)]
    return FinetuneBatch(edges, users, hist, pos, negs[:, -1].copy(), targets, negs)


def make_finetune_batch(ds, split, B, L, rng, per_position: bool = False) -> FinetuneBatch:
    """Sample ``B`` train edges with prior history; pair each with one negative."""
    anchors = finetune_anchors(ds, split)
    if len(anchors) == 0:
        raise DataError("no train edge has a nonempty prior user history")
    picked = rng.choice(anchors, size=B, replace=len(anchors) < B)
    return finetune_batch_for(ds, split, picked, L, rng, per_position)


def seen_items(ds: BipartiteDataset, split: Optional[Split], scope: str) -> List[np.ndarray]:
    """Sorted unique items per user within ``scope`` ('train' or 'all')."""
    if scope not in ("train", "all"):
        raise ConfigError(f"unknown negative-sampling scope {scope!r}")
    cache = split.cache if split is not None else ds.__dict__.setdefault("_cache", {})
    key = ("seen", scope)
    if key not in cache:
        if scope == "train":
            if split is None:
                raise ContractError("scope='train' needs a split")
            allowed = split.mask("train", n_edges=ds.n_edges)
            cache[key] = [np.unique(ds.edge_item[e[allowed[e]]]) for e in ds.user_edges]
        else:
            cache[key] = [np.unique(ds.edge_item[e]) for e in ds.user_edges]
    return cache[key]


def sample_negatives(ds, u, n, rng, scope: str = "train", split: Optional[Split] = None) -> np.ndarray:
    """Uniformly sample ``n`` distinct items that ``u`` never interacted with in ``scope``."""
    seen = seen_items(ds, split, scope)[u]
    n_eligible = ds.n_items - len(seen)
    if n > n_eligible:
        raise DataError(f"user {u}: {n} negatives requested but only {n_eligible} eligible items")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if 4 * n <= n_eligible:
        chosen: List[int] = []
        taken = set()
        while len(chosen) < n:
            c = int(rng.integers(1, ds.n_items + 1))
            if c in taken:
                continue
            k = np.searchsorted(seen, c)
            if k < len(seen) and seen[k] == c:
                continue
            taken.add(c)
            chosen.append(c)
        return np.array(chosen, dtype=np.int64)
    mask = np.ones(ds.n_items + 1, dtype=bool)
    mask[0] = False
    mask[seen] = False
    return rng.choice(np.flatnonzero(mask), size=n, replace=False)
