"""Synthetic interaction graphs with known structure."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .data import BipartiteDataset, InteractionRecord, build_dataset


@dataclass
class PlantedGraph:
    dataset: BipartiteDataset
    records: List[InteractionRecord]
    user_cluster: np.ndarray  # indexed by dense user id, entry 0 = -1
    item_cluster: np.ndarray  # indexed by dense item id, entry 0 = -1


def planted_graph(n_clusters: int = 8, users_per_cluster: int = 200, items_per_cluster: int = 50,
                  interactions_per_user: int = 30, p_within: float = 0.9, seed: int = 0,
                  time_span: int = 1_000_000) -> PlantedGraph:
    """Users in cluster k interact mostly with items of cluster k.

    Each user draws ``interactions_per_user`` distinct items; each draw comes
    from the paired item cluster with probability ``p_within`` and from the
    rest of the catalog otherwise.  Timestamps are uniform over ``time_span``.
    """
    rng = np.random.default_rng(seed)
    n_items = n_clusters * items_per_cluster
    item_keys = [f"i{j:05d}" for j in range(n_items)]
    records = []
    for k in range(n_clusters):
        own = np.arange(k * items_per_cluster, (k + 1) * items_per_cluster)
        other = np.setdiff1d(np.arange(n_items), own)
        for m in range(users_per_cluster):
            user = f"u{k * users_per_cluster + m:05d}"
            n_in = int(rng.binomial(interactions_per_user, p_within))
            n_in = min(n_in, len(own))
            picks = np.concatenate([
                rng.choice(own, size=n_in, replace=False),
                rng.choice(other, size=interactions_per_user - n_in, replace=False),
            ])
            rng.shuffle(picks)
            times = np.sort(rng.integers(0, time_span, size=interactions_per_user))
            records.extend(InteractionRecord(user, item_keys[j], int(t)) for j, t in zip(picks, times))
    order = rng.permutation(len(records))
    records = [records[i] for i in order]
    ds = build_dataset(records)
    ucl = np.full(ds.n_users + 1, -1)
    for key, idx in ds.user_index.items():
        ucl[idx] = int(key[1:]) // users_per_cluster
    icl = np.full(ds.n_items + 1, -1)
    for key, idx in ds.item_index.items():
        icl[idx] = int(key[1:]) // items_per_cluster
    return PlantedGraph(ds, records, ucl, icl)


def toy_records() -> List[InteractionRecord]:
    """A fixed 4-user / 6-item graph used by gradient checks and smoke tests."""
    rows = [
        ("u1", "a", 1), ("u2", "b", 2), ("u1", "b", 3), ("u3", "c", 4),
        ("u2", "a", 5), ("u4", "d", 6), ("u3", "a", 7), ("u1", "c", 8),
        ("u4", "e", 9), ("u2", "c", 10), ("u3", "f", 11), ("u4", "b", 12),
        ("u1", "d", 13), ("u2", "e", 14), ("u3", "b", 15), ("u4", "f", 16),
        ("u1", "f", 17), ("u2", "d", 18),
    ]
    return [InteractionRecord(u, i, t) for u, i, t in rows]
