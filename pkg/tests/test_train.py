import json
import math
from dataclasses import replace

import numpy as np
import pytest

from pdtlab import nn
from pdtlab import tensor as T
from pdtlab import train as TR
from pdtlab.checkpoint import from_bytes, load_checkpoint, to_bytes
from pdtlab.data import finetune_anchors, pretrain_anchors, split_leave_one_out
from pdtlab.errors import ConfigError, ContractError, NumericError
from pdtlab.evaluation import evaluate
from pdtlab.model import LossConfig, pretrain_loss
from pdtlab.selfcheck import toy_instance
from pdtlab.synthetic import planted_graph

BASE = TR.TrainConfig(pretrain_epochs=1, finetune_epochs=3, batch_size=64, lr=3e-3, d_user=8, d_content=8,
                      num_layers=1, num_heads=2, d_ff=16, hist_user=4, hist_content=4, hist_finetune=4,
                      eval_ks=(5, 10), log_wall_time=False, dtype="float64")


@pytest.fixture(scope="module")
def small():
    g = planted_graph(n_clusters=3, users_per_cluster=15, items_per_cluster=10, interactions_per_user=8, seed=2)
    return g.dataset, split_leave_one_out(g.dataset)


@pytest.fixture(scope="module")
def pre(small):
    ds, sp = small
    return TR.pretrain(ds, sp, BASE)


def test_config_validation_and_round_trip():
    assert TR.TrainConfig.from_dict(BASE.to_dict()) == BASE
    with pytest.raises(ConfigError):
        TR.TrainConfig.from_dict({**BASE.to_dict(), "bogus": 1})
    for bad in (dict(ablation="x"), dict(eval_ks=(5, 20)), dict(lr=0), dict(batch_size=1)):
        with pytest.raises(ConfigError):
            replace(BASE, **bad)


def test_uses_by_variant():
    assert [replace(BASE, ablation=v).uses() for v in TR.ABLATIONS] == \
        [(True, True), (False, True), (True, False), (False, False)]


def test_pretrain_is_deterministic(small, pre, tmp_path):
    ds, sp = small
    again = TR.pretrain(ds, sp, BASE, log_path=tmp_path / "a.jsonl")
    assert to_bytes(again) == to_bytes(pre)
    TR.pretrain(ds, sp, BASE, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert to_bytes(TR.pretrain(ds, sp, replace(BASE, seed=1))) != to_bytes(pre)


def test_pretrain_log_records(small, tmp_path):
    ds, sp = small
    TR.pretrain(ds, sp, replace(BASE, ablation="no_Lu"), log_path=tmp_path / "l.jsonl")
    recs = [json.loads(x) for x in (tmp_path / "l.jsonl").read_text().splitlines()]
    assert recs and all(r["L_u"] is None and r["L_c"] is not None and r["wall_ms"] is None for r in recs)
    assert [r["step"] for r in recs] == list(range(1, len(recs) + 1))


def test_finetune_determinism_and_resume(small, pre, tmp_path):
    ds, sp = small
    a = TR.finetune(ds, sp, BASE, init=pre, log_path=tmp_path / "a.jsonl")
    b = TR.finetune(ds, sp, BASE, init=pre, log_path=tmp_path / "b.jsonl")
    assert to_bytes(a.last) == to_bytes(b.last) and to_bytes(a.best) == to_bytes(b.best)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    half = TR.finetune(ds, sp, BASE, init=pre, stop_after_epoch=1, log_path=tmp_path / "c.jsonl")
    assert half.last.epoch == 1
    rest = TR.finetune(ds, sp, BASE, init=half.last, log_path=tmp_path / "c.jsonl")
    assert to_bytes(rest.last) == to_bytes(a.last)
    assert (tmp_path / "c.jsonl").read_bytes() == (tmp_path / "a.jsonl").read_bytes()


def test_best_val_consistent_with_reevaluation(small, pre):
    ds, sp = small
    res = TR.finetune(ds, sp, BASE, init=pre)
    vals = [r.recall[10] for r in res.reports]
    assert res.last.extra["val_history"] == vals
    assert res.best.best_val == max(vals) and res.best.best_epoch == vals.index(max(vals)) + 1
    model = TR.model_from_checkpoint(res.best)
    rep = evaluate(model, ds, sp, "val", BASE.protocol(), TR.eval_rng(BASE, res.best.best_epoch))
    assert rep.recall[10] == res.best.best_val


def test_checkpoint_dir(small, pre, tmp_path):
    ds, sp = small
    cfg = replace(BASE, finetune_epochs=1, checkpoint_dir=str(tmp_path / "ck"))
    res = TR.finetune(ds, sp, cfg, init=pre)
    assert to_bytes(load_checkpoint(tmp_path / "ck" / "finetune-last.pdtc")) == to_bytes(res.last)
    assert (tmp_path / "ck" / "finetune-best.pdtc").exists()


def test_no_lu_leaves_user_cls_untouched(small):
    ds, sp = small
    cfg = replace(BASE, ablation="no_Lu", finetune_epochs=1)
    p = TR.pretrain(ds, sp, cfg)
    init_model = TR.build_model(cfg, ds.n_users, ds.n_items, np.random.default_rng(cfg.seed))
    assert np.array_equal(p.params["g_u.cls"], init_model.g_u.cls.data)
    res = TR.finetune(ds, sp, cfg, init=p)
    assert np.array_equal(res.last.params["g_u.cls"], p.params["g_u.cls"])
    assert not np.array_equal(res.last.params["f_c"], p.params["f_c"])


def test_no_lc_leaves_content_encoder_untouched(small):
    ds, sp = small
    cfg = replace(BASE, ablation="no_Lc", finetune_epochs=1)
    p = TR.pretrain(ds, sp, cfg)
    res = TR.finetune(ds, sp, cfg, init=p)
    fresh = TR.build_model(cfg, ds.n_users, ds.n_items, np.random.default_rng(cfg.seed))
    for k, v in fresh.g_c_exclusive().items():
        assert np.array_equal(p.params[k], v.data)
        assert np.array_equal(res.last.params[k], v.data)


def test_no_both_rules(small, pre):
    ds, sp = small
    cfg = replace(BASE, ablation="no_both", finetune_epochs=1)
    with pytest.raises(ConfigError):
        TR.pretrain(ds, sp, cfg)
    with pytest.raises(ConfigError):
        TR.finetune(ds, sp, cfg, init=pre)
    res = TR.finetune(ds, sp, cfg)
    recs = TR.StepLog(None, False)
    TR.finetune(ds, sp, cfg, step_log=recs)
    assert all(r["L_u"] is None and r["L_c"] is None for r in recs.records)
    assert res.last.phase == "finetune"
    with pytest.raises(ContractError):
        TR.finetune(ds, sp, BASE)


def test_nan_reports_step(small, pre):
    ds, sp = small
    bad = from_bytes(to_bytes(pre))
    bad.params["f_c"][3, 0] = np.nan
    with pytest.raises(NumericError) as exc:
        TR.finetune(ds, sp, BASE, init=bad)
    assert exc.value.step == 1 and "step 1" in str(exc.value)


def test_run_variant_and_ablate(small):
    ds, sp = small
    cfg = replace(BASE, finetune_epochs=1)
    run = TR.run_variant(ds, sp, cfg, "no_both", 0)
    assert run.report.split == "test" and run.report.checkpoint_id == "no_both-seed0"
    out = TR.ablate(ds, sp, cfg, ["no_both"], seeds=[0, 1])
    other = TR.run_variant(ds, sp, cfg, "no_both", 1)
    assert out["no_both"].recall[10] == pytest.approx((run.report.recall[10] + other.report.recall[10]) / 2)
    with pytest.raises(ConfigError):
        TR.ablate(ds, sp, cfg, ["nope"])


def test_one_step_descent_majority():
    wins = 0
    for seed in range(5):
        inst = toy_instance(seed)
        m, pb, cfg = inst.model, inst.pretrain_batch, LossConfig()
        with T.precision(np.float64):
            def joint():
                l_u, l_c = pretrain_loss(m, pb, cfg, training=False)
                return l_u + l_c
            before = joint()
            value = float(before.data)
            T.backward(before)
            params = m.named_parameters()
            nn.adam_step(params, {k: p.grad for k, p in params.items()}, nn.AdamState(lr=1e-4))
            wins += float(joint().data) < value
    assert wins >= 3


def test_steps_per_epoch(small):
    ds, sp = small
    pre = TR.pretrain(ds, sp, replace(BASE, pretrain_epochs=2))
    n = len(pretrain_anchors(ds, sp))
    per_epoch = n // 64 + (n % 64 >= 2)
    assert pre.step == 2 * per_epoch
    res = TR.finetune(ds, sp, replace(BASE, finetune_epochs=1), init=pre)
    assert res.last.step == math.ceil(len(finetune_anchors(ds, sp)) / 64)
