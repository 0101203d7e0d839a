"""Command line entry point.

Every command writes under ``--run-dir``: a run-level manifest.jsonl (one line
per invocation) and a records.csv summary, plus one sub-directory per dataset.

    celmnav gen-dataset --out data --body D --preset desk --seed 0
    celmnav search-celm --dataset data/D/D1.jsonl --run-dir runs/desk --preset desk
    celmnav train-cnn --dataset data/D/D1.jsonl --run-dir runs/desk --preset desk
    celmnav build-hybrids --dataset data/D/D*.jsonl --run-dir runs/desk
    celmnav evaluate --dataset data/D/D*.jsonl --run-dir runs/desk
    celmnav report --run-dir runs/desk
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import search
from .archgen import C_GRID, read_grid_csv
from .imagery import CameraModel, build_dataset, load_manifest, make_body, sample_cloud, split_cloud
from .labels import LabelStrategy
from .navmetrics import emit_report, mean_eps_n, read_metric_rows, write_metric_rows
from .preprocess import save_prepared

log = logging.getLogger("celmnav")

SUMMARY_FIELDS = ["dataset", "method", "key", "split", "n", "mean_eps_n", "median_eps_n"]


def _log_invocation(run_dir: Path, args) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    entry = {"time": time.strftime("%Y-%m-%dT%H:%M:%S"), "command": args.command,
             "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}}
    with open(run_dir / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(entry, default=str) + "\n")


def _append_summary(run_dir: Path, rows: list[dict]) -> None:
    path = run_dir / "records.csv"
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        if new:
            w.writeheader()
        w.writerows(rows)


def _summary_row(ds, method, key, rows) -> dict:
    e = [r.eps_n for r in rows]
    return {"dataset": ds, "method": method, "key": key, "split": "test", "n": len(e),
            "mean_eps_n": mean_eps_n(rows), "median_eps_n": float(np.median(e))}


def _noise(args):
    return None if args.no_noise else 2.0 / 255.0


def _load_splits(args, manifest_path) -> search.DatasetSplits:
    manifest_path = Path(manifest_path)
    prepared = getattr(args, "prepared", None)
    if prepared:
        return search.load_prepared(Path(prepared) / manifest_path.stem, manifest_path)
    manifest = load_manifest(manifest_path)
    full, splits = search.prepare_from_manifest(manifest, args.seed, _noise(args))
    splits = np.array(splits)
    parts = [full.subset(np.flatnonzero(splits == s)) for s in search.SPLITS]
    return search.DatasetSplits(manifest.dataset_id, *parts)


def cmd_gen_dataset(args) -> int:
    preset = search.PRESETS[args.preset]
    sizes = tuple(args.sizes) if args.sizes else preset.sizes
    camera = CameraModel()
    bodies = list("DHLP") if args.body == "all" else [args.body]
    cloud = sample_cloud(sum(sizes), args.seed)
    split_cloud(cloud, sizes)
    for name in bodies:
        body = make_body(name, args.body_seed, camera)
        manifests = build_dataset(body, cloud, list(LabelStrategy), Path(args.out) / name, camera, seed=args.seed)
        for m in manifests:
            print(m.path)
    return 0


def cmd_preprocess(args) -> int:
    for path in args.dataset:
        manifest = load_manifest(path)
        full, splits = search.prepare_from_manifest(manifest, args.seed, _noise(args))
        out = Path(args.out) / manifest.dataset_id
        save_prepared(full, out, splits)
        print(out)
    return 0


def cmd_search_celm(args) -> int:
    run_dir = Path(args.run_dir)
    _log_invocation(run_dir, args)
    preset = search.PRESETS[args.preset]
    for path in args.dataset:
        data = _load_splits(args, path)
        if args.grid:
            grid, seeds = read_grid_csv(args.grid)
        else:
            grid, seeds = preset.grid(data.strategy), list(preset.seeds)
        res = search.run_celm_search(data, grid, seeds, run_dir / data.dataset_id, args.select_on, C_GRID,
                                     args.seed, args.workers)
        _append_summary(run_dir, [_summary_row(data.dataset_id, "CELM", f"{res.best_spec.key}/s{res.best_seed}",
                                               res.test_rows)])
        print(f"{data.dataset_id} CELM best {res.best_spec.key} seed {res.best_seed} "
              f"test eps_n {mean_eps_n(res.test_rows):.3f}%")
    return 0


def cmd_train_cnn(args) -> int:
    run_dir = Path(args.run_dir)
    _log_invocation(run_dir, args)
    preset = search.PRESETS[args.preset]
    epochs = args.epochs if args.epochs is not None else preset.epochs
    for path in args.dataset:
        data = _load_splits(args, path)
        ds_dir = run_dir / data.dataset_id
        celm_blob = ds_dir / "celm_best.bin"
        if not celm_blob.exists():
            raise SystemExit(f"{celm_blob} missing; run search-celm first")
        spec = search.load_celm(celm_blob).spec
        res = search.bootstrap_cnn(data, spec, args.batch_sizes or preset.batch_sizes, args.lrs or preset.lrs,
                                   args.runs or preset.runs, epochs, args.seed, ds_dir)
        print(f"{data.dataset_id} CNN best epoch {res.best.epoch} val loss {res.best.val_loss:.5g}")
    return 0


def cmd_build_hybrids(args) -> int:
    run_dir = Path(args.run_dir)
    _log_invocation(run_dir, args)
    datasets = {}
    bests = {}
    for path in args.dataset:
        data = _load_splits(args, path)
        datasets[data.dataset_id] = data
        bests[data.dataset_id] = search.load_checkpoint(run_dir / data.dataset_id / "cnn_best.bin")
    hybrids = search.build_hybrids(bests, datasets)
    for (ds, method), model in sorted(hybrids.items()):
        model.save(run_dir / ds / f"{method.lower()}_best.bin", dataset=ds)
        print(f"{ds} {method} C={model.result.C:g} val eps_n {model.result.val_score:.3f}%")
    return 0


MODEL_FILES = {"CELM": "celm_best.bin", "CNN": "cnn_best.bin", "HCELM": "hcelm_best.bin", "HCELM3": "hcelm3_best.bin"}


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    _log_invocation(run_dir, args)
    summary = []
    for path in args.dataset:
        data = _load_splits(args, path)
        ds_dir = run_dir / data.dataset_id
        for method, fname in MODEL_FILES.items():
            blob = ds_dir / fname
            if not blob.exists():
                continue
            model = search.load_checkpoint(blob) if method == "CNN" else search.load_celm(blob, method)
            rows = model.evaluate(data.test)
            write_metric_rows(ds_dir / f"metrics_{method}.csv", rows)
            summary.append(_summary_row(data.dataset_id, method, model.spec.key, rows))
            print(f"{data.dataset_id} {method:7s} test eps_n {summary[-1]['mean_eps_n']:.3f}%")
    _append_summary(run_dir, summary)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    _log_invocation(run_dir, args)
    rows = {}
    for f in sorted(run_dir.glob("*/metrics_*.csv")):
        rows[(f.stem.split("_", 1)[1], f.parent.name)] = read_metric_rows(f)
    if not rows:
        raise SystemExit(f"no metrics under {run_dir}; run evaluate first")
    files = emit_report(rows, run_dir / "report")
    for name, p in files.items():
        print(f"{name}: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="celmnav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True, run=True):
        sp.add_argument("--seed", type=int, default=0, help="master seed")
        sp.add_argument("--preset", choices=sorted(search.PRESETS), default="desk")
        if dataset:
            sp.add_argument("--dataset", nargs="+", required=True, help="dataset manifest(s) (*.jsonl)")
            sp.add_argument("--prepared", help="directory of preprocessed datasets, one sub-directory per id")
            sp.add_argument("--no-noise", action="store_true", help="skip the sensor noise at S1")
        if run:
            sp.add_argument("--run-dir", required=True)

    sp = sub.add_parser("gen-dataset", help="render one body under all five labeling strategies")
    common(sp, dataset=False, run=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--body", default="D", choices=["D", "H", "L", "P", "sphere", "all"])
    sp.add_argument("--body-seed", type=int, default=0)
    sp.add_argument("--sizes", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    sp.set_defaults(func=cmd_gen_dataset)

    sp = sub.add_parser("preprocess", help="S0 -> S2 images and labels")
    common(sp, run=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("search-celm", help="architecture search over CELM specs")
    common(sp)
    sp.add_argument("--grid", help="grid CSV (spec columns plus seed); default is the preset grid")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--select-on", choices=["test", "val"], default="test")
    sp.set_defaults(func=cmd_search_celm)

    sp = sub.add_parser("train-cnn", help="gradient training on the CELM-selected architecture")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-sizes", type=int, nargs="+")
    sp.add_argument("--lrs", type=float, nargs="+")
    sp.add_argument("--runs", type=int)
    sp.set_defaults(func=cmd_train_cnn)

    sp = sub.add_parser("build-hybrids", help="HCELM and HCELM3 from trained CNN encoders")
    common(sp)
    sp.set_defaults(func=cmd_build_hybrids)

    sp = sub.add_parser("evaluate", help="test-set metrics for every saved model")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="summary tables from evaluated metrics")
    sp.add_argument("--run-dir", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
