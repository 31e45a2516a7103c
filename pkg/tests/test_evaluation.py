import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from oracles import ref_ndcg, ref_recall, sort_rank

from pdtlab import evaluation as E
from pdtlab import tensor as T
from pdtlab.data import InteractionRecord, Split, build_dataset, split_leave_one_out
from pdtlab.errors import ConfigError, ContractError
from pdtlab.model import PdtModel


def tiny_model(ds, seed, d=6, L=4):
    rng = np.random.default_rng(seed)
    m = PdtModel.create(ds.n_users, ds.n_items, d, d, num_layers=1, num_heads=2, d_ff=8, dropout_p=0.0,
                        max_len=L, rng=rng)
    for name, p in m.named_parameters().items():
        p.data[...] = 0.5 * rng.standard_normal(p.shape)
        if name in ("f_u", "f_c"):
            p.data[0] = 0.0
    return m


def test_rank_examples():
    assert E.pessimistic_rank(np.array([0.1, 0.2]), 0.5) == 1
    assert E.pessimistic_rank(np.full(4, 0.3), 0.3) == 5
    assert E.recall_at_k(1, 10) == 1 and E.recall_at_k(11, 10) == 0 and E.recall_at_k(10, 10) == 1
    assert E.ndcg_at_k(1, 10) == 1.0 and E.ndcg_at_k(3, 10) == 0.5 and E.ndcg_at_k(11, 10) == 0.0
    with pytest.raises(ContractError):
        E.recall_at_k(0, 5)


@given(st.integers(0, 2**31))
def test_rank_matches_sort_oracle(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 50))
    # coarse values force ties
    scores = r.integers(0, 6, size=n).astype(float)
    t = int(r.integers(0, n))
    rank = E.pessimistic_rank(np.delete(scores, t), scores[t])
    assert rank == sort_rank(list(scores), t)
    for k in (1, 5, 10, 20):
        assert E.recall_at_k(rank, k) == ref_recall(rank, k)
        assert E.ndcg_at_k(rank, k) == ref_ndcg(rank, k)


@given(st.lists(st.integers(1, 60), min_size=1, max_size=40))
def test_metrics_monotone_in_k(ranks):
    rec, nd = E.metrics_from_ranks(ranks, (1, 5, 10, 20, 50))
    vals = [rec[k] for k in (1, 5, 10, 20, 50)]
    assert vals == sorted(vals)
    assert all(0 <= nd[k] <= rec[k] <= 1 for k in rec)
    assert [nd[k] for k in (1, 5, 10, 20, 50)] == sorted(nd[k] for k in (1, 5, 10, 20, 50))


def test_random_scores_recall_is_k_over_c():
    r = np.random.default_rng(0)
    C, n = 50, 4000
    ranks = []
    for _ in range(n):
        s = r.random(C)
        t = int(r.integers(C))
        ranks.append(E.pessimistic_rank(np.delete(s, t), s[t]))
    rec, _ = E.metrics_from_ranks(ranks, (5, 10, 20))
    for k in (5, 10, 20):
        p = k / C
        assert abs(rec[k] - p) < 3 * math.sqrt(p * (1 - p) / n)


def chain_dataset(n_users=12, n_items=10, length=5):
    # user u walks items u, u+1, ... (mod n_items); each next item is last + 1
    recs = []
    for u in range(n_users):
        for s in range(length):
            recs.append(InteractionRecord(f"u{u}", f"i{(u + s) % n_items:02d}", 10 * s + u))
    recs += [InteractionRecord("warm", f"i{j:02d}", 1000 + j) for j in range(n_items)]
    return build_dataset(recs)


def test_oracle_model_gets_perfect_recall(monkeypatch):
    ds = chain_dataset()
    sp = split_leave_one_out(ds)
    m = tiny_model(ds, 0, d=ds.n_items)
    m.f_c.data[1:] = np.eye(ds.n_items)
    succ = {ds.item_index[f"i{j:02d}"]: ds.item_index[f"i{(j + 1) % ds.n_items:02d}"] for j in range(ds.n_items)}

    def oracle_decode(model, hist, training=False, rng=None):
        last = np.asarray(hist)[:, -1]
        return T.tensor(model.f_c.data[[succ[int(c)] for c in last]])

    monkeypatch.setattr(E, "decode_next", oracle_decode)
    for which in ("val", "test"):
        rep = E.evaluate(m, ds, sp, which, E.EvalProtocol(ks=(1, 5, 10)))
        assert rep.n_users == 13  # includes the warm-up walker
        assert all(v == 1.0 for v in rep.recall.values()) and all(v == 1.0 for v in rep.ndcg.values())


def distinct_item_instance(seed):
    r = np.random.default_rng(seed)
    n_items = int(r.integers(6, 12))
    recs = []
    for u in range(int(r.integers(2, 5))):
        k = int(r.integers(3, n_items - 1))
        for s, c in enumerate(r.permutation(n_items)[:k]):
            recs.append(InteractionRecord(f"u{u}", f"i{c}", 10 * s + u))
    recs += [InteractionRecord("w", f"i{c}", 1000 + c) for c in range(n_items)]
    return build_dataset(recs)


@pytest.mark.parametrize("seed", range(20))
def test_sampled_with_full_complement_equals_full_rank(seed):
    ds = distinct_item_instance(seed)
    sp = split_leave_one_out(ds)
    m = tiny_model(ds, seed)
    cases, _ = E.evaluation_cases(ds, sp, "test")
    full = E.case_ranks(m, ds, sp, cases, E.EvalProtocol(ks=(1,), history_len=4), None)
    for c, rank in zip(cases, full):
        n_seen = len(np.unique(ds.user_items(c.user)))
        if n_seen == ds.n_items:
            continue  # the warm-up user has no complement to sample
        proto = E.EvalProtocol(mode="sampled", n_negatives=ds.n_items - n_seen, ks=(1,), history_len=4)
        sampled = E.case_ranks(m, ds, sp, [c], proto, np.random.default_rng(seed))
        assert sampled[0] == rank


def test_full_rank_matches_per_case_oracle():
    ds = distinct_item_instance(3)
    sp = split_leave_one_out(ds)
    m = tiny_model(ds, 3)
    cases, _ = E.evaluation_cases(ds, sp, "val")
    got = E.case_ranks(m, ds, sp, cases, E.EvalProtocol(exclude_seen=False, ks=(1,), history_len=4), None)
    for c, rank in zip(cases, got):
        tail = c.history[-4:]
        hist = np.concatenate([np.zeros(4 - len(tail), dtype=np.int64), tail])
        assert rank == E.rank_of_target(m, hist, c.target, np.arange(1, ds.n_items + 1))


def test_evaluation_histories_and_skips():
    ds = build_dataset([InteractionRecord(*r) for r in [
        ("a", "x", 1), ("a", "y", 2), ("a", "z", 3), ("a", "x", 4),
        ("b", "y", 5), ("b", "z", 6), ("b", "x", 7)]])
    sp = Split(np.array([0, 1, 2, 4]), np.array([3, 5]), np.array([6]), "manual")
    val, skipped = E.evaluation_cases(ds, sp, "val")
    assert [c.history.tolist() for c in val] == [[1, 2, 3], [2]]
    test, _ = E.evaluation_cases(ds, sp, "test")
    # test histories may use validation edges
    assert test[0].history.tolist() == [2, 3]
    sp2 = Split(np.array([0, 1, 2]), np.array([4]), np.empty(0, int), "manual")
    cases, skipped = E.evaluation_cases(ds, sp2, "val")
    assert cases == [] and skipped == 1
    with pytest.raises(ConfigError):
        E.evaluation_cases(ds, sp, "train")


def test_sampled_needs_rng_and_protocol_validation():
    ds = distinct_item_instance(0)
    sp = split_leave_one_out(ds)
    with pytest.raises(ContractError):
        E.evaluate(tiny_model(ds, 0), ds, sp, "val", E.EvalProtocol(mode="sampled", n_negatives=2, ks=(1,)))
    for kw in (dict(mode="x"), dict(ks=(10, 5)), dict(ks=()), dict(mode="sampled", n_negatives=3, ks=(5,))):
        with pytest.raises(ConfigError):
            E.EvalProtocol(**kw)


def report(r10, cid):
    return E.MetricsReport({10: r10}, {10: r10 / 2}, 5, checkpoint_id=cid)


def test_select_model():
    assert E.select_model([report(0.1, "a")]) == "a"
    assert E.select_model([report(0.1, "a"), report(0.2, "b"), report(0.3, "c")]) == "c"
    seq = [report(v, f"e{i}") for i, v in enumerate([0.1, 0.2, 0.2, 0.4, 0.3, 0.35, 0.3, 0.4])]
    assert E.select_model(seq) == "e3"
    with pytest.raises(ContractError):
        E.select_model([])


def test_report_serialization():
    rep = E.MetricsReport({5: 0.5, 10: 0.75}, {5: 0.25, 10: 0.3}, 4, 1, {"mode": "full_rank"}, "test", "ck")
    back = E.MetricsReport.from_dict(json.loads(rep.to_json()))
    assert back == rep
    lines = E.reports_to_csv([rep]).splitlines()
    assert lines[0] == "checkpoint,protocol,K,recall,ndcg"
    assert lines[1:] == ["ck,full_rank,5,0.5,0.25", "ck,full_rank,10,0.75,0.3"]
    assert E.metrics_from_ranks([], (10,)) == ({10: 0.0}, {10: 0.0})
