"""Position reconstruction from network outputs and navigation error metrics."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial.transform import Rotation

from .labels import LabelStrategy

if TYPE_CHECKING:
    from .imagery import CameraModel, GroundTruth
    from .preprocess import PreprocessRecord

METHODS = ("CELM", "CNN", "HCELM", "HCELM3")


def spherical_to_cartesian(az_deg, el_deg, rho):
    """X = rho cos(el) cos(az), Y = rho cos(el) sin(az), Z = rho sin(el).

    Accepts scalars or arrays; the Cartesian axis is appended last.
    """
    az = np.deg2rad(np.asarray(az_deg, dtype=float))
    el = np.deg2rad(np.asarray(el_deg, dtype=float))
    rho = np.asarray(rho, dtype=float)
    return np.stack([rho * np.cos(el) * np.cos(az), rho * np.cos(el) * np.sin(az), rho * np.sin(el)], axis=-1)


def cartesian_to_spherical(p):
    p = np.asarray(p, dtype=float)
    rho = np.linalg.norm(p, axis=-1)
    az = np.rad2deg(np.arctan2(p[..., 1], p[..., 0]))
    el = np.rad2deg(np.arcsin(np.clip(p[..., 2] / rho, -1, 1)))
    return np.stack([az, el, rho], axis=-1)


@dataclass
class PositionEstimate:
    position: np.ndarray
    frame: str
    sample_id: int = 0
    method: str = ""
    cof: np.ndarray | None = None
    rho: float | None = None


def observables_to_position(
    delta_s2,
    rho_s2: float,
    record: "PreprocessRecord",
    camera: "CameraModel",
    q_cam_to_w,
    sample_id: int = 0,
    method: str = "",
) -> PositionEstimate:
    """Rebuild a W-frame position from (delta, rho) predicted in S2.

    The CoF is recovered from the preprocessing CoB and the rescaled delta,
    turned into a line of sight through K^-1, stretched by the S0 range,
    rotated into W with the CAM->W quaternion (scalar-last) and negated.
    """
    k = record.gamma / 128.0
    cof = record.blob.cob + np.asarray(delta_s2, dtype=float) * k
    rho = float(rho_s2) * k
    o_uv = np.array([cof[0], cof[1], 1.0])
    o_imp = camera.K_inv @ o_uv
    los = o_imp / np.linalg.norm(o_imp)
    # the line of sight points at the body, so the camera sits at minus rho * los
    p_w = -Rotation.from_quat(q_cam_to_w).apply(rho * los)
    return PositionEstimate(p_w, "W", sample_id, method, cof=cof, rho=rho)


def labels_to_position(
    values_s2,
    record: "PreprocessRecord",
    strategy: LabelStrategy,
    camera: "CameraModel | None" = None,
    q_cam_to_w=None,
    sample_id: int = 0,
    method: str = "",
) -> PositionEstimate:
    """S2 label estimate -> S0 position in the strategy's frame."""
    values = np.asarray(values_s2, dtype=float)
    k = record.gamma / 128.0
    if strategy is LabelStrategy.DR:
        if camera is None or q_cam_to_w is None:
            raise ValueError("the (delta, rho) path needs the camera and the attitude quaternion")
        return observables_to_position(values[:2], values[2], record, camera, q_cam_to_w, sample_id, method)
    if strategy.spherical:
        p = spherical_to_cartesian(values[0], values[1], values[2] * k)
    else:
        p = values * k
    return PositionEstimate(np.asarray(p), strategy.frame, sample_id, method)


def estimate_positions(values_s2, records, truths, strategy, camera, method: str = "") -> list[PositionEstimate]:
    """Vector of label rows -> position estimates; attitude taken from the truths (error-free)."""
    return [
        labels_to_position(v, r, strategy, camera, t.q_cam_to_w, sample_id=i, method=method)
        for i, (v, r, t) in enumerate(zip(np.atleast_2d(values_s2), records, truths))
    ]


@dataclass
class MetricRow:
    sample_id: int
    eps_p: np.ndarray
    eps_n: float
    eps_cam: np.ndarray
    cof_err_u: float | None = None
    cof_err_v: float | None = None
    cof_err: float | None = None
    rho_err: float | None = None

    def as_dict(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "eps_x": self.eps_p[0], "eps_y": self.eps_p[1], "eps_z": self.eps_p[2],
            "eps_n": self.eps_n,
            "eps_cam_x": self.eps_cam[0], "eps_cam_y": self.eps_cam[1], "eps_cam_z": self.eps_cam[2],
        }
        for k in ("cof_err_u", "cof_err_v", "cof_err", "rho_err"):
            d[k] = getattr(self, k)
        return d


def position_error_pct(eps_p, rho_true) -> np.ndarray:
    """Norm of the position error as a percentage of the true range."""
    return 100.0 * np.linalg.norm(np.atleast_2d(eps_p), axis=-1) / np.asarray(rho_true, dtype=float)


def compute_metrics(estimates: list[PositionEstimate], truths: list["GroundTruth"], strategy: LabelStrategy) -> list[MetricRow]:
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimates for {len(truths)} truths")
    from .imagery import rot_z

    rows = []
    for i, (est, truth) in enumerate(zip(estimates, truths)):
        if est.sample_id != i:
            raise ValueError(f"estimate {i} carries sample id {est.sample_id}")
        true_p = truth.position_as if strategy.frame == "AS" else truth.position_w
        if est.frame != strategy.frame:
            raise ValueError(f"estimate frame {est.frame} does not match strategy frame {strategy.frame}")
        eps = np.asarray(est.position, dtype=float) - true_p
        eps_w = rot_z(truth.spin_deg) @ eps if strategy.frame == "AS" else eps
        eps_cam = truth.rotation_cam_to_w.inv().apply(eps_w)
        row = MetricRow(i, eps, float(position_error_pct(eps, truth.rho)[0]), eps_cam)
        if strategy is LabelStrategy.DR and est.cof is not None:
            row.cof_err_u = float(truth.cof[0] - est.cof[0])
            row.cof_err_v = float(truth.cof[1] - est.cof[1])
            row.cof_err = float(np.hypot(row.cof_err_u, row.cof_err_v))
            row.rho_err = float(est.rho - truth.rho)
        rows.append(row)
    return rows


def mean_eps_n(rows: list[MetricRow]) -> float:
    return float(np.mean([r.eps_n for r in rows]))


def error_ellipse(errors) -> dict:
    """Mean and principal axes of 2-D errors; 1-sigma and 2-sigma semi-axes."""
    e = np.asarray(errors, dtype=float)
    mean = e.mean(axis=0)
    cov = np.cov(e, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    sig = np.sqrt(np.clip(vals, 0, None))
    return {
        "mean_u": mean[0], "mean_v": mean[1],
        "cov_uu": cov[0, 0], "cov_uv": cov[0, 1], "cov_vv": cov[1, 1],
        "sigma_major": sig[0], "sigma_minor": sig[1],
        "angle_deg": float(np.rad2deg(np.arctan2(vecs[1, 0], vecs[0, 0]))),
        "semi_major_1s": sig[0], "semi_minor_1s": sig[1],
        "semi_major_2s": 2 * sig[0], "semi_minor_2s": 2 * sig[1],
    }


def five_number(values) -> dict:
    v = np.asarray(values, dtype=float)
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return {"n": v.size, "min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4], "mean": v.mean()}


def split_dataset_id(ds: str) -> tuple[str, LabelStrategy]:
    return ds[:-1], LabelStrategy.parse(ds[-1])


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def emit_report(rows: dict[tuple[str, str], list[MetricRow]], out_dir, bins: int = 30) -> dict[str, Path]:
    """Write box-plot summaries, the mean matrix, best-method shares,
    CoF/range histograms, CoF error ellipses and per-axis CAM errors.

    ``rows`` maps (method, dataset_id) to aligned metric rows.
    """
    if not rows:
        raise ValueError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}

    box, matrix, cam = [], [], []
    for (method, ds), mrows in sorted(rows.items(), key=lambda kv: (kv[0][1], _method_order(kv[0][0]))):
        box.append({"method": method, "dataset": ds, **five_number([r.eps_n for r in mrows])})
        body, strategy = split_dataset_id(ds)
        matrix.append({"body": body, "strategy": strategy.value, "dataset": ds, "method": method,
                       "mean_eps_n": mean_eps_n(mrows)})
        ec = np.abs(np.array([r.eps_cam for r in mrows]))
        cam.append({"method": method, "dataset": ds, "mean_abs_cam_x": ec[:, 0].mean(),
                    "mean_abs_cam_y": ec[:, 1].mean(), "mean_abs_cam_z": ec[:, 2].mean()})
    for name, table in (("boxplot", box), ("mean_matrix", matrix), ("cam_axis_errors", cam)):
        files[name] = out / f"{name}.csv"
        _write_csv(files[name], table)

    by_ds = defaultdict(dict)
    for (method, ds), mrows in rows.items():
        by_ds[ds][method] = mrows
    shares = []
    for ds in sorted(by_ds):
        methods = sorted(by_ds[ds], key=_method_order)
        errs = np.array([[r.eps_n for r in by_ds[ds][m]] for m in methods])
        winners = np.argmin(errs, axis=0)
        for j, m in enumerate(methods):
            shares.append({"dataset": ds, "method": m, "share_pct": 100.0 * np.mean(winners == j)})
    files["best_share"] = out / "best_share.csv"
    _write_csv(files["best_share"], shares)

    hist_rows, ellipses = [], []
    for (method, ds), mrows in sorted(rows.items()):
        dr = [r for r in mrows if r.cof_err is not None]
        if not dr:
            continue
        for metric in ("cof_err", "rho_err"):
            vals = np.array([getattr(r, metric) for r in dr])
            counts, edges = np.histogram(vals, bins=bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                hist_rows.append({"metric": metric, "method": method, "dataset": ds, "bin_lo": lo, "bin_hi": hi, "count": int(c)})
        ellipses.append({"method": method, "dataset": ds,
                         **error_ellipse([[r.cof_err_u, r.cof_err_v] for r in dr])})
    files["histograms"] = out / "histograms.csv"
    _write_csv(files["histograms"], hist_rows)
    files["ellipses"] = out / "ellipses.csv"
    _write_csv(files["ellipses"], ellipses)

    series = {"boxplot": box, "mean_matrix": matrix, "best_share": shares, "histograms": hist_rows, "ellipses": ellipses}
    files["series"] = out / "series.json"
    files["series"].write_text(json.dumps(series, indent=1, default=float))
    return files


def _method_order(method: str) -> int:
    return METHODS.index(method) if method in METHODS else len(METHODS)


def write_metric_rows(path, rows: list[MetricRow]) -> None:
    _write_csv(Path(path), [r.as_dict() for r in rows])


def read_metric_rows(path) -> list[MetricRow]:
    out = []
    with open(path) as fh:
        for d in csv.DictReader(fh):
            opt = {k: (float(d[k]) if d[k] not in ("", "None") else None) for k in ("cof_err_u", "cof_err_v", "cof_err", "rho_err")}
            out.append(MetricRow(
                int(d["sample_id"]),
                np.array([float(d["eps_x"]), float(d["eps_y"]), float(d["eps_z"])]),
                float(d["eps_n"]),
                np.array([float(d["eps_cam_x"]), float(d["eps_cam_y"]), float(d["eps_cam_z"])]),
                **opt,
            ))
    return out
