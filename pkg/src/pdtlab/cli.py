"""Command-line entry point: ``pdt <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
3 numeric failure (non-finite loss or failed gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .analysis import export_from_table, join_metadata, nearest_neighbors, pca_2d, write_export
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, defaults_from_train_config, parse_overrides, resolve
from .data import (CACHE_MAGIC, BipartiteDataset, Split, build_dataset, load_dataset, load_interactions, save_dataset,
                   split_by_time, split_leave_one_out, write_interactions)
from .errors import ConfigError, ContractError, DataError, NumericError
from .evaluation import CSV_HEADER, evaluate, reports_to_csv
from .selfcheck import full_loss_gradcheck
from .synthetic import planted_graph
from .train import ABLATIONS, ablate, finetune, model_from_checkpoint, pretrain

log = logging.getLogger("pdtlab")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, data=True, out=True, out_required=False) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    if data:
        p.add_argument("--data", help="dataset cache (.pdtd) or raw interaction file")
    if out:
        p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdt", description="Dual-encoder contrastive pre-training for sequential recommendation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("prepare", help="parse interactions (or generate a planted graph) into a dataset cache")
    _common(p, data=False, out_required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="raw interaction file")
    src.add_argument("--planted", action="store_true", help="generate the planted-cluster graph")
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--users-per-cluster", type=int, default=200)
    p.add_argument("--items-per-cluster", type=int, default=50)
    p.add_argument("--interactions", type=int, default=30)
    p.add_argument("--p-within", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="contrastive pre-training")
    _common(p, out_required=True)

    p = sub.add_parser("finetune", help="fine-tune with validation-based model selection")
    _common(p, out_required=True)
    p.add_argument("--init", help="pre-training checkpoint (omit for ablation no_both)")
    p.add_argument("--resume", help="fine-tuning checkpoint to continue from")
    p.add_argument("--stop-after-epoch", type=int)

    p = sub.add_parser("evaluate", help="score a checkpoint on val or test")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--params", choices=("best", "last"), default="best",
                   help="use the best-validation tensors (when present) or the final ones")

    p = sub.add_parser("ablate", help="run loss-ablation variants and report test metrics")
    _common(p)
    p.add_argument("--variants", default=",".join(ABLATIONS))
    p.add_argument("--seeds", default="0")
    p.add_argument("--k", type=int, default=10, help="K shown in the per-variant summary rows")

    p = sub.add_parser("neighbors", help="cosine nearest neighbors of one entity")
    _common(p, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=("content", "user"), default="content")
    p.add_argument("--key", required=True, help="external key of the query entity")
    p.add_argument("--k", type=int, default=10)

    p = sub.add_parser("export-embeddings", help="write embeddings (or a 2-D projection) as TSV")
    _common(p, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=("content", "user"), default="content")
    p.add_argument("--out", required=True, help="output TSV path")
    p.add_argument("--pca", action="store_true", help="export 2-D principal coordinates")
    p.add_argument("--metadata", help="TSV side file keyed by entity key")
    p.add_argument("--metadata-key", help="key column of the side file (default: first)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective on a toy instance")
    p.add_argument("--seed", type=int, default=0)
    return parser


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path: Path, command: str, rc: Optional[RunConfig], inputs: Sequence[Optional[str]],
                   seed: Optional[int], extra: Optional[Dict] = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": rc.flat() if rc else None,
        "inputs": {str(p): sha256_file(p) for p in inputs if p},
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _resolve(args, defaults=None) -> RunConfig:
    overrides = parse_overrides(args.set)
    if getattr(args, "data", None):
        is_cache = Path(args.data).is_file() and Path(args.data).read_bytes()[:4] == CACHE_MAGIC
        overrides.setdefault("data.dataset" if is_cache else "data.input", args.data)
    return resolve(args.config, overrides, defaults)


def load_data(rc: RunConfig) -> BipartiteDataset:
    if rc.data.dataset:
        return load_dataset(rc.data.dataset)
    if rc.data.input:
        return build_dataset(load_interactions(rc.data.input, rc.data.format_spec()))
    raise UsageError("no dataset given (use --data or data.dataset / data.input)")


def make_split(ds: BipartiteDataset, rc: RunConfig) -> Split:
    if rc.data.split == "leave_one_out":
        return split_leave_one_out(ds)
    return split_by_time(ds, rc.data.fractions)


def _data_path(rc: RunConfig) -> Optional[str]:
    return rc.data.dataset or rc.data.input


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fresh(path: Path) -> Path:
    if path.exists():
        path.unlink()
    return path


def cmd_prepare(args) -> int:
    rc = _resolve(args)
    out = _outdir(args.out)
    if args.planted:
        g = planted_graph(args.clusters, args.users_per_cluster, args.items_per_cluster, args.interactions,
                          args.p_within, args.seed)
        ds = g.dataset
        write_interactions(g.records, out / "interactions.tsv")
        for kind, keys, clusters in (("user", ds.user_keys, g.user_cluster), ("item", ds.item_keys, g.item_cluster)):
            with open(out / f"{kind}_clusters.tsv", "w", encoding="utf-8") as fh:
                fh.write("key\tcluster\n")
                for i in range(1, len(keys)):
                    fh.write(f"{keys[i]}\t{clusters[i]}\n")
        inputs: List[Optional[str]] = []
        seed = args.seed
    else:
        records = load_interactions(args.input, rc.data.format_spec())
        if records.malformed:
            log.warning("skipped %d malformed line(s)", records.malformed)
        ds = build_dataset(records)
        inputs, seed = [args.input], None
    save_dataset(ds, out / "dataset.pdtd")
    split = make_split(ds, rc)
    stats = {"users": ds.n_users, "items": ds.n_items, "edges": ds.n_edges,
             "train": len(split.train), "val": len(split.val), "test": len(split.test)}
    write_manifest(out / "manifest.json", "prepare", rc, inputs, seed,
                   {"stats": stats, "planted": vars(args) if args.planted else None} if args.planted
                   else {"stats": stats})
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    rc = _resolve(args)
    ds = load_data(rc)
    split = make_split(ds, rc)
    out = _outdir(args.out)
    ckpt = pretrain(ds, split, rc.train, log_path=_fresh(out / "train_log.jsonl"))
    save_checkpoint(ckpt, out / "pretrain.pdtc")
    write_manifest(out / "manifest.json", "pretrain", rc, [_data_path(rc), args.config], rc.train.seed)
    print(f"wrote {out / 'pretrain.pdtc'} after {ckpt.step} steps")
    return 0


def cmd_finetune(args) -> int:
    if args.init and args.resume:
        raise UsageError("--init and --resume are mutually exclusive")
    init = load_checkpoint(args.resume or args.init) if (args.resume or args.init) else None
    rc = _resolve(args, defaults_from_train_config(init.config) if init else None)
    ds = load_data(rc)
    split = make_split(ds, rc)
    out = _outdir(args.out)
    log_path = out / "train_log.jsonl"
    if not args.resume:
        _fresh(log_path)
    res = finetune(ds, split, rc.train, init=init, log_path=log_path, stop_after_epoch=args.stop_after_epoch)
    save_checkpoint(res.last, out / "finetune-last.pdtc")
    save_checkpoint(res.best, out / "finetune-best.pdtc")
    if res.reports:
        with open(out / "val_metrics.csv", "a" if args.resume else "w", encoding="utf-8") as fh:
            fh.write(reports_to_csv(res.reports, header=not args.resume))
    write_manifest(out / "manifest.json", "finetune", rc, [_data_path(rc), args.config, args.init, args.resume],
                   rc.train.seed)
    print(f"best val Recall@10 {res.last.best_val} at epoch {res.last.best_epoch}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    rc = _resolve(args, defaults_from_train_config(ckpt.config))
    ds = load_data(rc)
    split = make_split(ds, rc)
    which = "best" if args.params == "best" and ckpt.best_params else "params"
    model = model_from_checkpoint(ckpt, which)
    report = evaluate(model, ds, split, args.split, rc.train.protocol(), np.random.default_rng([rc.train.seed, 3]),
                      checkpoint_id=Path(args.checkpoint).name)
    print(report.to_json())
    if args.out:
        out = _outdir(args.out)
        (out / f"metrics_{args.split}.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / f"metrics_{args.split}.csv").write_text(reports_to_csv([report]), encoding="utf-8")
        write_manifest(out / "manifest.json", "evaluate", rc, [_data_path(rc), args.config, args.checkpoint],
                       rc.train.seed)
    return 0


def cmd_ablate(args) -> int:
    rc = _resolve(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if args.k not in rc.train.eval_ks:
        raise UsageError(f"--k {args.k} is not among eval.ks {list(rc.train.eval_ks)}")
    ds = load_data(rc)
    split = make_split(ds, rc)
    out = _outdir(args.out) if args.out else None
    reports = ablate(ds, split, rc.train, variants, seeds,
                     log_path=_fresh(out / "train_log.jsonl") if out else None)
    print(",".join(CSV_HEADER))
    for v in variants:
        r = reports[v]
        print(",".join(str(x) for x in r.csv_rows()[sorted(r.recall).index(args.k)]))
    if out:
        (out / "ablation.csv").write_text(reports_to_csv(list(reports.values())), encoding="utf-8")
        (out / "ablation.json").write_text(
            json.dumps({v: r.to_dict() for v, r in reports.items()}, sort_keys=True, indent=2) + "\n",
            encoding="utf-8")
        write_manifest(out / "manifest.json", "ablate", rc, [_data_path(rc), args.config], rc.train.seed,
                       {"variants": variants, "seeds": seeds})
    return 0


def _table(ckpt, kind: str) -> np.ndarray:
    params = ckpt.best_params or ckpt.params
    return params["f_c" if kind == "content" else "f_u"]


def cmd_neighbors(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    rc = _resolve(args, defaults_from_train_config(ckpt.config))
    ds = load_data(rc)
    keys = ds.item_keys if args.kind == "content" else ds.user_keys
    index = ds.item_index if args.kind == "content" else ds.user_index
    if args.key not in index:
        raise DataError(f"unknown {args.kind} key {args.key!r}")
    table = _table(ckpt, args.kind)
    if table.shape[0] != len(keys):
        raise DataError(f"checkpoint has {table.shape[0] - 1} {args.kind} rows, dataset has {len(keys) - 1}")
    E = table[1:]
    hits = nearest_neighbors(E, index[args.key], args.k, ids=np.arange(1, len(keys)))
    print("rank\tkey\tcosine")
    for r, (i, s) in enumerate(hits, 1):
        print(f"{r}\t{keys[i]}\t{s:.6f}")
    return 0


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    rc = _resolve(args, defaults_from_train_config(ckpt.config))
    ds = load_data(rc)
    keys = ds.item_keys if args.kind == "content" else ds.user_keys
    exp = export_from_table(_table(ckpt, args.kind), keys, args.kind)
    if args.metadata:
        exp = join_metadata(exp, args.metadata, args.metadata_key)
        if exp.missing_metadata:
            print(f"{exp.missing_metadata} row(s) without metadata", file=sys.stderr)
    coords = pca_2d(exp.matrix) if args.pca else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_export(exp, out, coords)
    write_manifest(out.with_name(out.name + ".manifest.json"), "export-embeddings", rc,
                   [_data_path(rc), args.config, args.checkpoint, args.metadata], rc.train.seed,
                   {"kind": args.kind, "pca": args.pca})
    print(f"wrote {len(exp.keys)} rows to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    err = full_loss_gradcheck(args.seed)
    ok = err < GRADCHECK_TOL
    print(f"max relative error: {err:.3e} ({'pass' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    return 0 if ok else 3


COMMANDS = {
    "prepare": cmd_prepare, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "neighbors": cmd_neighbors, "export-embeddings": cmd_export, "gradcheck": cmd_gradcheck,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"pdt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"pdt {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"pdt {args.command}: data error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
