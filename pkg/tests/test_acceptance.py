"""Acceptance criteria, each at its stated tolerance. Slow: about 15 minutes."""

import time

import numpy as np
import pytest

from fdcheck import fd_report, small_problem

from celmnav.archgen import (ACTIVATIONS, POOLINGS, ArchSpec, cnn_grid, count_params, desk_grid, enumerate_specs,
                             layer_table)
from celmnav.elm import solve_beta, solve_beta_branch
from celmnav.gd import TrainConfig, train_cnn
from celmnav.imagery import CameraModel, make_body, render, sample_cloud
from celmnav.labels import LabelStrategy
from celmnav.navmetrics import compute_metrics, emit_report, estimate_positions, mean_eps_n
from celmnav.preprocess import (GAMMAS, NoiseSpec, blob_analysis, choose_gamma, invert_labels, to_s1, to_s2)
from celmnav.search import (build_hybrids, hcelm3_sources, image_seed, mean_label_baseline, prepare_dataset,
                            prepare_views, run_celm_search)

D5_PARAMS = {"C1": 160, "C2": 4640, "C3": 18496, "C4": 73856, "C5": 295168, "O": 12291}
D5_SHAPES = {"I": (128, 128, 1), "C1": (128, 128, 16), "P1": (64, 64, 16), "C2": (64, 64, 32),
                 "P2": (32, 32, 32), "C3": (32, 32, 64), "P3": (16, 16, 64), "C4": (16, 16, 128),
                 "P4": (8, 8, 128), "C5": (8, 8, 256), "P5": (4, 4, 256), "FC": (4096,), "O": (3,)}


def test_criterion_1_parameter_accounting(criterion):
    t0 = time.perf_counter()
    cum = [count_params(ArchSpec(d)).encoder_total for d in range(1, 6)]
    table = {name: (shape, params) for name, _, shape, params in layer_table(ArchSpec(5))}
    shapes_ok = all(table[k][0] == v for k, v in D5_SHAPES.items())
    params_ok = all(table[k][1] == v for k, v in D5_PARAMS.items())
    zero_ok = all(p == 0 for k, (_, p) in table.items() if k not in D5_PARAMS)
    dt = time.perf_counter() - t0
    ok = cum == [160, 4800, 23296, 97152, 392320] and shapes_ok and params_ok and zero_ok and dt < 1.0
    assert criterion(1, "parameter accounting", ok, f"cumulative {cum}, head {table['O'][1]}, {dt:.3f}s")


def test_criterion_2_ls_solver(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    worst_oracle = worst_branch = 0.0
    branches = set()
    for k in range(50):
        n, L, m = int(r.integers(2, 80)), int(r.integers(2, 80)), int(r.integers(1, 5))
        if k < 25:  # make sure both N<=L and N>L are covered
            n, L = min(n, L), max(n, L)
        else:
            n, L = max(n, L) + 1, min(n, L)
        C = float(10 ** r.uniform(-4, 4))
        H, T = r.normal(size=(n, L)), r.normal(size=(n, m))
        branches.add(n <= L)
        beta = solve_beta(H, T, C)
        oracle = np.linalg.solve(H.T @ H + np.eye(L) / C, H.T @ T)
        worst_oracle = max(worst_oracle, np.linalg.norm(beta - oracle) / np.linalg.norm(oracle))
        pd, pp = H @ solve_beta_branch(H, T, C, True), H @ solve_beta_branch(H, T, C, False)
        worst_branch = max(worst_branch, np.linalg.norm(pd - pp) / np.linalg.norm(pp))
    dt = time.perf_counter() - t0
    ok = worst_oracle < 1e-8 and worst_branch < 1e-8 and branches == {True, False} and dt < 10
    assert criterion(2, "LS solver", ok, f"oracle rel {worst_oracle:.2e}, branch rel {worst_branch:.2e}, {dt:.2f}s")


def test_criterion_3_gradients(criterion):
    t0 = time.perf_counter()
    results = {}
    for act in ACTIVATIONS:
        for pool in POOLINGS:
            results[(act, pool)] = fd_report(*small_problem(act, pool, seed=1))
    dt = time.perf_counter() - t0
    worst = max(v["max_rel_error"] for v in results.values())
    skipped = sum(v["skipped"] for v in results.values())
    checked = sum(v["checked"] for v in results.values())
    ok = worst < 1e-3 and dt < 60 and skipped < 0.01 * checked
    assert criterion(3, "gradient check", ok,
                     f"{len(results)} activation/pooling pairs, max rel {worst:.2e}, {checked} checked, "
                     f"{skipped} on kinks, {dt:.1f}s")


def test_criterion_4_preprocessing_closure(criterion):
    cam = CameraModel()
    bodies = [make_body(n, 0, cam) for n in "DHLP"]
    views = sample_cloud(500, 404)
    worst_label = worst_cob = 0.0
    gamma_ok = alpha_ok = True
    for i, view in enumerate(views):
        img, truth = render(bodies[i % 4], cam, view)
        blob = blob_analysis(img)
        s1, l1, rec = to_s1(img, truth.labels(LabelStrategy.DR), blob, image_seed(4, i))
        g = choose_gamma(blob.width, blob.height)
        gamma_ok &= rec.gamma == g and g >= max(blob.width, blob.height)
        gamma_ok &= all(x < max(blob.width, blob.height) for x in GAMMAS if x < g)
        alpha_ok &= 0 <= rec.alpha_u <= rec.gamma - blob.width and 0 <= rec.alpha_v <= rec.gamma - blob.height
        s2 = to_s2(s1, l1, rec, NoiseSpec(2 / 255, image_seed(4, i, 1)))
        back = invert_labels(s2.labels, rec)
        worst_label = max(worst_label, np.abs(back.values - l1.values).max(), np.abs(back.cob - l1.cob).max(),
                          np.abs(back.cof - l1.cof).max())
        # geometric check: noise off, blob re-run at the threshold recorded in S0
        clean = to_s2(s1, l1, rec, None)
        worst_cob = max(worst_cob, np.linalg.norm(blob_analysis(clean.image, blob.threshold).cob - clean.labels.cob))
    ok = worst_label <= 1e-9 and worst_cob <= 1.5 and gamma_ok and alpha_ok
    assert criterion(4, "preprocessing closure", ok,
                     f"500 images, label round-trip {worst_label:.1e}, S2 CoB {worst_cob:.3f}px, "
                     f"gamma minimal {gamma_ok}, alpha in range {alpha_ok}")


def test_criterion_5_geometric_closure(criterion):
    cam = CameraModel()
    views = sample_cloud(1000, 505)
    parts = [prepare_views(make_body(n, 0, cam), views[k::4], cam, 5) for k, n in enumerate("DHLP")]
    fractions = {}
    for s in LabelStrategy:
        eps = []
        for part in parts:
            p = part.with_strategy(s)
            est = estimate_positions(p.labels, p.records, p.truths, s, cam)
            eps += [r.eps_n for r in compute_metrics(est, p.truths, s)]
        fractions[s.name] = float(np.mean(np.array(eps) < 0.1))
    ok = len(eps) == 1000 and min(fractions.values()) >= 0.99
    assert criterion(5, "geometric closure", ok, ", ".join(f"{k} {v:.3f}" for k, v in fractions.items()))


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Body D, 600/200/200, desk grid of 12 specs x seeds 64 and 65 (24 CELM runs)."""
    t0 = time.perf_counter()
    data = prepare_dataset(make_body("D", 0), sizes=(600, 200, 200), cloud_seed=64, master_seed=64)
    res = run_celm_search(data, desk_grid(data.strategy), seeds=(64, 65), run_dir=tmp_path_factory.mktemp("desk"),
                          master_seed=64)
    return data, res, time.perf_counter() - t0


def test_criterion_6_learning_sanity(criterion, desk_run):
    data, res, dt = desk_run
    celm = mean_eps_n(res.test_rows)
    base = mean_eps_n(mean_label_baseline(data))
    ok = len(res.records) == 24 and celm * 3 <= base and dt < 15 * 60
    assert criterion(6, "desk learning sanity", ok,
                     f"best {res.best_spec.key}/s{res.best_seed} test eps_n {celm:.2f}% vs mean-label {base:.2f}% "
                     f"(ratio {base / celm:.2f}x, need 3x), {dt / 60:.1f} min")


@pytest.fixture(scope="module")
def desk_cnn(desk_run):
    data, res, _ = desk_run
    t0 = time.perf_counter()
    ck = train_cnn(data.train, data.val, res.best_spec, TrainConfig(batch_size=64, lr=1e-3, epochs=30, seed=64))
    return ck, time.perf_counter() - t0


def test_criterion_7_speed_ordering(criterion, desk_run, desk_cnn):
    _, res, _ = desk_run
    ck, cnn_time = desk_cnn
    celm_time = float(res.best_record["wall_time"])
    ok = cnn_time >= 20 * celm_time
    assert criterion(7, "speed ordering", ok,
                     f"{res.best_spec.key}: CELM {celm_time:.1f}s vs CNN 30 epochs {cnn_time:.1f}s "
                     f"({cnn_time / celm_time:.0f}x)")


def test_criterion_8_methodology(criterion):
    specs = enumerate_specs()
    strategies = {f"{b}{s.index}": s for b in "DHLP" for s in LabelStrategy}
    scores = {ds: float(i) for i, ds in enumerate(sorted(strategies))}
    encoders = set(hcelm3_sources(scores, strategies).values())
    ok = len(specs) == 120 and len(specs) * 3 == 360 and len(cnn_grid()) == 45 and len(encoders) == 3
    assert criterion(8, "methodology structure", ok,
                     f"{len(specs)} specs, {len(specs) * 3} runs, {len(cnn_grid())} CNN cases, "
                     f"{len(encoders)} HCELM3 encoders")


def test_criterion_9_report_artifacts(criterion, desk_run, desk_cnn, tmp_path):
    data, res, _ = desk_run
    ck, _ = desk_cnn
    ds = data.dataset_id
    rows = {("CELM", ds): res.test_rows, ("CNN", ds): ck.evaluate(data.test)}
    for (d, method), model in build_hybrids({ds: ck}, {ds: data}).items():
        rows[(method, d)] = model.evaluate(data.test)
    files = emit_report(rows, tmp_path)
    want = ("boxplot", "mean_matrix", "best_share", "histograms", "ellipses")
    present = [k for k in want if k in files and files[k].stat().st_size > 0]
    ok = present == list(want)
    means = {m: f"{mean_eps_n(r):.1f}%" for (m, _), r in rows.items()}
    assert criterion(9, "report artifact types", ok,
                     f"{', '.join(present)}; desk means {means}; published figures not reproduced (procedural bodies)")
