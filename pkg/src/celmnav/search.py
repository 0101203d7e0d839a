"""Experiment orchestration: CELM grid search, CNN bootstrap, hybrid heads.

Every run is keyed by (dataset, spec, seed) and appended to ``records.csv``
as soon as it finishes, so an interrupted search resumes where it stopped.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archgen import C_GRID, ArchSpec, cnn_grid
from .elm import CelmModel, train_celm
from .gd import Checkpoint, TrainConfig, train_cnn, train_hybrid
from .imagery import (DESK_SPLITS, PAPER_SPLITS, BodyModel, CameraModel, GroundTruth, ViewpointSample, dataset_id, render,
                      sample_cloud, split_cloud)
from .labels import LabelStrategy
from .navmetrics import mean_eps_n
from .neural import init_kernels
from .preprocess import NoiseSpec, PreparedSet, PreprocessRecord, blob_analysis, s2_labels, to_s1, to_s2

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
RECORD_FIELDS = ["dataset", "key", "depth", "kernel_dist", "activation", "pooling", "n_out", "seed",
                 "C", "val_eps_n", "test_eps_n", "wall_time", "status", "error"]
CNN_FIELDS = ["dataset", "key", "batch_size", "lr", "run", "seed", "epochs", "best_epoch", "val_loss",
              "val_eps_n", "wall_time", "status", "error"]


@dataclass(frozen=True)
class Preset:
    """Scale settings for a full experiment."""

    name: str
    sizes: tuple[int, int, int]
    seeds: tuple[int, ...]
    epochs: int
    batch_sizes: tuple[int, ...]
    lrs: tuple[float, ...]
    runs: int
    desk_grid: bool

    def grid(self, strategy: LabelStrategy | None = None) -> list[ArchSpec]:
        from .archgen import desk_grid, enumerate_specs

        return desk_grid(strategy) if self.desk_grid else enumerate_specs(strategy)


PRESETS = {
    "desk": Preset("desk", DESK_SPLITS, (64, 65), 30, (64,), (1e-3, 1e-4), 1, True),
    "paper": Preset("paper", PAPER_SPLITS, (0, 1, 2), 300, (64, 128, 256), (1e-1, 1e-2, 1e-3, 1e-4, 1e-5), 3, False),
}


def image_seed(master_seed: int, index: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([master_seed, index, stream]).generate_state(1)[0])


@dataclass
class DatasetSplits:
    dataset_id: str
    train: PreparedSet
    val: PreparedSet
    test: PreparedSet

    @property
    def strategy(self) -> LabelStrategy:
        return self.train.strategy

    def with_strategy(self, strategy: LabelStrategy, body_name: str | None = None) -> "DatasetSplits":
        ds = dataset_id(body_name or self.dataset_id[:-1], strategy)
        return DatasetSplits(ds, self.train.with_strategy(strategy), self.val.with_strategy(strategy),
                             self.test.with_strategy(strategy))


def prepare_views(body: BodyModel, views: list[ViewpointSample], camera: CameraModel, master_seed: int,
                  strategy: LabelStrategy = LabelStrategy.DR, noise_sigma: float | None = 2.0 / 255.0) -> PreparedSet:
    """Render and preprocess in one pass, keeping only the 128x128 images."""
    images = np.empty((len(views), 128, 128), dtype=np.float32)
    records: list[PreprocessRecord] = []
    truths: list[GroundTruth] = []
    labels = np.empty((len(views), 3))
    for i, view in enumerate(views):
        img, truth = render(body, camera, view)
        blob = blob_analysis(img)
        s1, _, record = to_s1(img, None, blob, image_seed(master_seed, view.index))
        noise = None if noise_sigma is None else NoiseSpec(noise_sigma, image_seed(master_seed, view.index, 1))
        images[i] = to_s2(s1, None, record, noise).image
        records.append(record)
        truths.append(truth)
        labels[i] = s2_labels(truth.labels(strategy), record).values
    return PreparedSet(images, labels, records, truths, strategy, np.array([v.index for v in views]), camera)


def prepare_dataset(body: BodyModel, strategy: LabelStrategy = LabelStrategy.DR, sizes=DESK_SPLITS,
                    cloud_seed: int = 0, master_seed: int = 0, camera: CameraModel | None = None,
                    noise_sigma: float | None = 2.0 / 255.0) -> DatasetSplits:
    """In-memory train/val/test splits for one body and labeling strategy."""
    camera = camera or CameraModel()
    cloud = sample_cloud(sum(sizes), cloud_seed)
    parts = split_cloud(cloud, sizes)
    sets = [prepare_views(body, part, camera, master_seed, strategy, noise_sigma) for part in parts]
    return DatasetSplits(dataset_id(body.name, strategy), *sets)


def prepare_from_manifest(manifest, master_seed: int = 0, noise_sigma: float | None = 2.0 / 255.0,
                          camera: CameraModel | None = None) -> tuple[PreparedSet, list[str]]:
    """Preprocess every image listed in a dataset manifest; returns the set and per-row split names."""
    from .imagery import load_dataset_meta

    if camera is None:
        _, camera = load_dataset_meta(manifest.path.parent)
    n = len(manifest.records)
    images = np.empty((n, 128, 128), dtype=np.float32)
    records, truths, labels, splits = [], [], np.empty((n, 3)), []
    for i, rec in enumerate(manifest.records):
        img = manifest.image(rec)
        truth = GroundTruth.from_dict(rec["truth"])
        blob = blob_analysis(img)
        s1, _, record = to_s1(img, None, blob, image_seed(master_seed, rec["index"]))
        noise = None if noise_sigma is None else NoiseSpec(noise_sigma, image_seed(master_seed, rec["index"], 1))
        images[i] = to_s2(s1, None, record, noise).image
        records.append(record)
        truths.append(truth)
        labels[i] = s2_labels(truth.labels(manifest.strategy), record).values
        splits.append(rec["split"])
    ids = np.array([r["index"] for r in manifest.records])
    return PreparedSet(images, labels, records, truths, manifest.strategy, ids, camera), splits


def load_prepared(prepared_dir, manifest_path, camera: CameraModel | None = None) -> DatasetSplits:
    """Rebuild splits from a preprocessed directory and its dataset manifest."""
    from .imagery import load_dataset_meta, load_manifest

    prepared_dir = Path(prepared_dir)
    manifest = load_manifest(manifest_path)
    if camera is None:
        _, camera = load_dataset_meta(Path(manifest_path).parent)
    truth_by_index = {r["index"]: GroundTruth.from_dict(r["truth"]) for r in manifest.records}
    with open(prepared_dir / "labels.csv") as fh:
        label_rows = list(csv.DictReader(fh))
    with open(prepared_dir / "records.csv") as fh:
        record_rows = list(csv.DictReader(fh))
    n = len(label_rows)
    images = np.fromfile(prepared_dir / "images.f32", dtype="<f4").reshape(n, 128, 128)
    strategy = manifest.strategy
    cols = strategy.columns
    ids = np.array([int(r["id"]) for r in label_rows])
    labels = np.array([[float(r[c]) for c in cols] for r in label_rows])
    records = [PreprocessRecord.from_row(r) for r in record_rows]
    truths = [truth_by_index[i] for i in ids]
    splits = np.array([r["split"] for r in label_rows])
    full = PreparedSet(images, labels, records, truths, strategy, ids, camera)
    parts = [full.subset(np.flatnonzero(splits == s)) for s in SPLITS]
    return DatasetSplits(manifest.dataset_id, *parts)


class RecordLog:
    """Append-only CSV of run records, reloaded on restart."""

    def __init__(self, path, fields):
        self.path = Path(path) if path is not None else None
        self.fields = fields
        self.rows: list[dict] = []
        if self.path is not None and self.path.exists():
            with open(self.path) as fh:
                self.rows = list(csv.DictReader(fh))

    def done(self, key: tuple) -> dict | None:
        for r in self.rows:
            if tuple(str(r[k]) for k in ("dataset", "key", "seed")) == tuple(str(k) for k in key):
                return r
        return None

    def append(self, row: dict) -> None:
        self.rows.append({k: row.get(k, "") for k in self.fields})
        if self.path is None:
            return
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.fields)
            if new:
                w.writeheader()
            w.writerow({k: row.get(k, "") for k in self.fields})


def _spec_of(row: dict) -> ArchSpec:
    return ArchSpec(int(row["depth"]), row["kernel_dist"], row["activation"], row["pooling"], int(row["n_out"]))


def select_best(records: list[dict], select_on: str = "test") -> dict:
    """Lowest mean error on ``select_on``; ties go to the lexicographically earlier spec, then seed."""
    col = f"{select_on}_eps_n"
    ok = [r for r in records if r.get("status", "ok") == "ok" and r.get(col) not in ("", None)]
    if not ok:
        raise RuntimeError("every run failed; nothing to select")
    return min(ok, key=lambda r: (float(r[col]), _spec_of(r).sort_key, int(r["seed"])))


@dataclass
class SearchResult:
    best_spec: ArchSpec
    best_seed: int
    best_record: dict
    records: list[dict]
    model: CelmModel | None = None
    test_rows: list = field(default_factory=list)


def _celm_run(data: DatasetSplits, spec: ArchSpec, seed: int, c_grid):
    row = {"dataset": data.dataset_id, "key": spec.key, "depth": spec.depth, "kernel_dist": spec.kernel_dist,
           "activation": spec.activation, "pooling": spec.pooling, "n_out": spec.n_out, "seed": seed}
    t0 = time.perf_counter()
    model = None
    try:
        params = init_kernels(spec, seed, celm=True)
        result = train_celm(data.train, data.val, params, spec, c_grid)
        model = CelmModel(params, spec, result)
        test_rows = model.evaluate(data.test)
        row.update(C=result.C, val_eps_n=result.val_score, test_eps_n=mean_eps_n(test_rows), status="ok")
    except Exception as exc:  # record-and-continue
        log.warning("run %s/%s failed: %s", spec.key, seed, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        model = None
    row["wall_time"] = time.perf_counter() - t0
    return row, model


_WORKER_DATA: DatasetSplits | None = None


def _worker_init(data):
    global _WORKER_DATA
    _WORKER_DATA = data


def _worker_run(args):
    spec, seed, c_grid = args
    row, _ = _celm_run(_WORKER_DATA, spec, seed, c_grid)
    return row


def run_celm_search(data: DatasetSplits, grid: list[ArchSpec], seeds=(0, 1, 2), run_dir=None,
                    select_on: str = "test", c_grid=C_GRID, master_seed: int = 0, workers: int = 1) -> SearchResult:
    """Train every (spec, seed) CELM, score on val and test, select the best.

    Failed runs are recorded with their error and the search continues. With
    ``workers > 1`` runs go to a process pool; only the parent writes records.
    """
    if select_on not in ("test", "val"):
        raise ValueError("select_on must be 'test' or 'val'")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    log_ = RecordLog(run_dir / "records.csv" if run_dir else None, RECORD_FIELDS)
    manifest = _Manifest(run_dir / "manifest.jsonl" if run_dir else None)
    manifest.write({"type": "header", "dataset": data.dataset_id, "grid": [s.key for s in grid],
                    "seeds": list(seeds), "master_seed": master_seed, "select_on": select_on,
                    "c_grid": list(c_grid)})

    n_out = data.strategy.n_out
    todo = []
    for spec in grid:
        spec = ArchSpec(spec.depth, spec.kernel_dist, spec.activation, spec.pooling, n_out=n_out)
        for seed in seeds:
            if log_.done((data.dataset_id, spec.key, seed)) is None:
                todo.append((spec, seed))

    models = {}
    if workers > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(data,)) as pool:
            for row in pool.map(_worker_run, [(s, seed, c_grid) for s, seed in todo]):
                log_.append(row)
                manifest.write({"type": "run", **row})
    else:
        for spec, seed in todo:
            row, model = _celm_run(data, spec, seed, c_grid)
            log_.append(row)
            manifest.write({"type": "run", **row})
            if model is not None:
                models[(spec.key, seed)] = model

    best = select_best([r for r in log_.rows if r["dataset"] == data.dataset_id], select_on)
    spec, seed = _spec_of(best), int(best["seed"])
    model = models.get((spec.key, seed))
    if model is None:
        # selected run came from a resumed record or a worker; rebuild it
        _, model = _celm_run(data, spec, seed, c_grid)
    test_rows = model.evaluate(data.test)
    manifest.write({"type": "selection", "method": "CELM", "key": spec.key, "seed": seed, "select_on": select_on,
                    "score": float(best[f"{select_on}_eps_n"])})
    if run_dir is not None:
        model.save(run_dir / "celm_best.bin", dataset=data.dataset_id, seed=seed)
    return SearchResult(spec, seed, best, log_.rows, model, test_rows)


class _Manifest:
    def __init__(self, path):
        self.path = path

    def write(self, obj: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as fh:
            fh.write(json.dumps(obj, default=float) + "\n")


@dataclass
class BootstrapResult:
    best: Checkpoint
    records: list[dict]


def bootstrap_cnn(data: DatasetSplits, best_spec: ArchSpec, batch_sizes=(64, 128, 256),
                  lrs=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5), runs: int = 3, epochs: int = 300, master_seed: int = 0,
                  run_dir=None, kernel_seed: int | None = None) -> BootstrapResult:
    """Train the CNN on the CELM-selected architecture over batch size x lr x runs.

    The best checkpoint is the one with the lowest validation loss; diverged
    runs are recorded and skipped.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    log_ = RecordLog(run_dir / "cnn_records.csv" if run_dir else None, CNN_FIELDS)
    spec = ArchSpec(best_spec.depth, best_spec.kernel_dist, best_spec.activation, best_spec.pooling,
                    n_out=data.strategy.n_out)
    best: Checkpoint | None = None
    for bs, lr, run in cnn_grid(batch_sizes, lrs, runs):
        seed = image_seed(master_seed, run, 7) if kernel_seed is None else kernel_seed + run
        tag = f"{spec.key}-b{bs}-lr{lr:g}-r{run}"
        row = {"dataset": data.dataset_id, "key": tag, "batch_size": bs, "lr": lr, "run": run, "seed": seed,
               "epochs": epochs}
        t0 = time.perf_counter()
        try:
            cfg = TrainConfig(batch_size=bs, lr=lr, epochs=epochs, seed=seed)
            ckpt = train_cnn(data.train, data.val, spec, cfg)
            row.update(best_epoch=ckpt.epoch, val_loss=ckpt.val_loss, val_eps_n=ckpt.val_eps_n, status="ok")
            if best is None or ckpt.val_loss < best.val_loss:
                best = ckpt
        except Exception as exc:
            log.warning("CNN run %s failed: %s", tag, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        row["wall_time"] = time.perf_counter() - t0
        log_.append(row)
    if best is None:
        raise RuntimeError(f"every CNN run failed for {data.dataset_id}; see cnn_records.csv")
    if run_dir is not None:
        best.save(run_dir / "cnn_best.bin", dataset=data.dataset_id)
        best.write_log(run_dir / "train_log.csv")
    return BootstrapResult(best, log_.rows)


def hcelm3_sources(val_scores: dict[str, float], strategies: dict[str, LabelStrategy]) -> dict[str, str]:
    """For every dataset, the dataset whose CNN encoder is best in its frame group.

    Groups are the image-observable labels, the AS frame and the W frame.
    Ties go to the alphabetically first dataset id.
    """
    groups: dict[str, list[str]] = {}
    for ds, strat in strategies.items():
        groups.setdefault(strat.frame_group, []).append(ds)
    out = {}
    for group, members in groups.items():
        missing = [m for m in members if m not in val_scores]
        if missing:
            raise KeyError(f"no CNN best for {missing} in frame group {group}")
        winner = min(sorted(members), key=lambda m: val_scores[m])
        for m in members:
            out[m] = winner
    return out


def build_hybrids(cnn_bests: dict[str, Checkpoint], datasets: dict[str, DatasetSplits],
                  c_grid=C_GRID) -> dict[tuple[str, str], CelmModel]:
    """HCELM with each dataset's own CNN encoder, HCELM3 with its frame group's best encoder."""
    missing = [ds for ds in datasets if ds not in cnn_bests]
    if missing:
        raise KeyError(f"missing CNN best for {missing}")
    scores = {ds: (cnn_bests[ds].val_eps_n if cnn_bests[ds].val_eps_n is not None else cnn_bests[ds].val_loss)
              for ds in datasets}
    sources = hcelm3_sources(scores, {ds: d.strategy for ds, d in datasets.items()})
    out = {}
    for ds, data in datasets.items():
        out[(ds, "HCELM")] = train_hybrid(cnn_bests[ds], data.train, data.val, c_grid=c_grid, method="HCELM")
        out[(ds, "HCELM3")] = train_hybrid(cnn_bests[sources[ds]], data.train, data.val, c_grid=c_grid,
                                           method="HCELM3")
    return out


def mean_label_baseline(data: DatasetSplits, split: str = "test") -> list:
    """Metric rows for predicting the mean training label on every sample."""
    from . import navmetrics
    from .labels import decode_targets, encode_targets

    target = getattr(data, split)
    mean = encode_targets(data.train.labels, data.strategy).mean(axis=0)
    labels = decode_targets(np.tile(mean, (len(target), 1)), data.strategy)
    est = navmetrics.estimate_positions(labels, target.records, target.truths, target.strategy, target.camera, "MEAN")
    return navmetrics.compute_metrics(est, target.truths, target.strategy)


def load_celm(path, method: str | None = None) -> CelmModel:
    """Rebuild a saved CELM or hybrid from its blob and sidecar."""
    from .elm import CelmResult, Normalizer
    from .neural import load_model

    params, spec, meta = load_model(path)
    result = CelmResult(params.head.beta, float(meta["C"]), float(meta["val_score"]),
                        Normalizer.from_dict(meta["normalizer"]))
    return CelmModel(params, spec, result, method or meta.get("method", "CELM"))


def load_checkpoint(path) -> Checkpoint:
    from .elm import Normalizer
    from .neural import load_model

    params, spec, meta = load_model(path)
    return Checkpoint(params, spec, int(meta["epoch"]), float(meta["val_loss"]),
                      Normalizer.from_dict(meta["normalizer"]), val_eps_n=meta.get("val_eps_n"))
