"""Desk-scale experiment: one or more bodies, all five strategies, CELM -> CNN -> hybrids -> report.

    python scripts/desk_experiment.py --run-dir runs/desk --bodies D --workers 4
"""

import argparse
import logging
import time
from pathlib import Path

from celmnav.imagery import make_body
from celmnav.labels import LabelStrategy
from celmnav.navmetrics import emit_report, mean_eps_n, write_metric_rows
from celmnav.search import PRESETS, bootstrap_cnn, build_hybrids, mean_label_baseline, prepare_dataset, run_celm_search


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run-dir", required=True)
    ap.add_argument("--bodies", default="D", help="subset of DHLP")
    ap.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    ap.add_argument("--seed", type=int, default=64)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--select-on", choices=["test", "val"], default="test")
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    preset = PRESETS[args.preset]
    run = Path(args.run_dir)
    datasets, cnns, rows = {}, {}, {}
    for name in args.bodies:
        base = prepare_dataset(make_body(name, 0), sizes=preset.sizes, cloud_seed=args.seed, master_seed=args.seed)
        for s in LabelStrategy:
            t0 = time.perf_counter()
            data = base if s is LabelStrategy.DR else base.with_strategy(s, name)
            ds = data.dataset_id
            res = run_celm_search(data, preset.grid(s), preset.seeds, run / ds, args.select_on,
                                  master_seed=args.seed, workers=args.workers)
            boot = bootstrap_cnn(data, res.best_spec, preset.batch_sizes, preset.lrs, preset.runs,
                                 args.epochs or preset.epochs, args.seed, run / ds)
            datasets[ds], cnns[ds] = data, boot.best
            rows[("CELM", ds)] = res.test_rows
            rows[("CNN", ds)] = boot.best.evaluate(data.test)
            base_err = mean_eps_n(mean_label_baseline(data))
            logging.info("%s CELM %.2f%% CNN %.2f%% mean-label %.2f%% (%.0fs)", ds, mean_eps_n(rows[("CELM", ds)]),
                         mean_eps_n(rows[("CNN", ds)]), base_err, time.perf_counter() - t0)
    for (ds, method), model in build_hybrids(cnns, datasets).items():
        model.save(run / ds / f"{method.lower()}_best.bin", dataset=ds)
        rows[(method, ds)] = model.evaluate(datasets[ds].test)
    for (method, ds), r in rows.items():
        write_metric_rows(run / ds / f"metrics_{method}.csv", r)
    for name, path in emit_report(rows, run / "report").items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
