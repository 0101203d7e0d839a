"""S0 -> S1 -> S2 preprocessing with exact label bookkeeping.

S0 is the native render, S1 the crop around the blob padded to a square of
side gamma at a random offset, S2 the (optionally noised) 128x128 resize.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .labels import LabelSet, LabelStrategy

S2_SIZE = 128
GAMMAS = (128, 256, 512, 1024)


class EmptyBlobError(ValueError):
    pass


def _bins(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=float) * 255), 0, 255).astype(np.int64)


def otsu_threshold(image: np.ndarray) -> float:
    """Otsu level on 256 bins, returned as an intensity in [0, 1].

    Pixels strictly above the returned level are foreground. Ties in the
    between-class variance go to the lower bin, and a constant image returns
    its own bin (so everything is background).
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    return otsu_from_histogram(np.bincount(_bins(image).ravel(), minlength=256)) / 255.0


def otsu_from_histogram(hist) -> int:
    """Bin index maximising the between-class variance of a 256-bin histogram."""
    hist = np.asarray(hist, dtype=float)
    if hist.shape != (256,) or hist.min() < 0 or hist.sum() <= 0:
        raise ValueError("need a non-negative 256-bin histogram with some mass")
    if np.count_nonzero(hist) <= 1:
        return int(np.flatnonzero(hist)[0])
    p = hist / hist.sum()
    levels = np.arange(256)
    w0 = np.cumsum(p)
    w1 = 1.0 - w0
    m0 = np.cumsum(p * levels)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between[~np.isfinite(between) | (w0 <= 0) | (w1 <= 1e-15)] = -1.0
    # ties within rounding go to the lowest bin
    best = between.max()
    return int(np.flatnonzero(between >= best * (1 - 1e-12))[0])


@dataclass
class BlobResult:
    """``cob`` is (u, v); ``bbox`` is (u0, v0, width, height) in pixels."""

    cob: np.ndarray
    bbox: tuple[int, int, int, int]
    threshold: float

    @property
    def width(self) -> int:
        return self.bbox[2]

    @property
    def height(self) -> int:
        return self.bbox[3]


def blob_analysis(image: np.ndarray, threshold: float | None = None, weighted: bool = True) -> BlobResult:
    """Centre of brightness and tight bounding box of the foreground.

    ``weighted=False`` gives the binary-mask centroid instead.
    """
    image = np.asarray(image, dtype=float)
    if threshold is None:
        threshold = otsu_threshold(image)
    mask = _bins(image) > int(round(threshold * 255))
    if not mask.any():
        raise EmptyBlobError("empty blob: no pixel above threshold")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    v0, v1, u0, u1 = rows[0], rows[-1], cols[0], cols[-1]
    w = np.where(mask, image, 0.0) if weighted else mask.astype(float)
    v, u = np.nonzero(mask)
    weights = w[v, u]
    total = weights.sum()
    if total <= 0:
        weights = np.ones_like(weights)
        total = weights.sum()
    cob = np.array([(u * weights).sum() / total, (v * weights).sum() / total])
    return BlobResult(cob, (int(u0), int(v0), int(u1 - u0 + 1), int(v1 - v0 + 1)), float(threshold))


@dataclass
class PreprocessRecord:
    blob: BlobResult
    gamma: int
    alpha_u: int
    alpha_v: int
    seed: int = 0
    noise_applied: bool = False

    @property
    def scale(self) -> float:
        return S2_SIZE / self.gamma

    @property
    def offset(self) -> np.ndarray:
        """S0 -> S1 pixel translation."""
        u0, v0 = self.blob.bbox[:2]
        return np.array([self.alpha_u - u0, self.alpha_v - v0], dtype=float)

    def as_row(self) -> dict:
        u0, v0, w, h = self.blob.bbox
        return {
            "bbox_u": u0, "bbox_v": v0, "bbox_w": w, "bbox_h": h,
            "gamma": self.gamma, "alpha_u": self.alpha_u, "alpha_v": self.alpha_v,
            "cob_u": self.blob.cob[0], "cob_v": self.blob.cob[1],
            "threshold": self.blob.threshold, "seed": self.seed, "noise": int(self.noise_applied),
        }

    @classmethod
    def from_row(cls, row: dict) -> "PreprocessRecord":
        blob = BlobResult(
            np.array([float(row["cob_u"]), float(row["cob_v"])]),
            (int(row["bbox_u"]), int(row["bbox_v"]), int(row["bbox_w"]), int(row["bbox_h"])),
            float(row["threshold"]),
        )
        return cls(blob, int(row["gamma"]), int(row["alpha_u"]), int(row["alpha_v"]),
                   int(row["seed"]), bool(int(row["noise"])))


def choose_gamma(width: int, height: int) -> int:
    side = max(width, height)
    for g in GAMMAS:
        if g >= side:
            return g
    raise ValueError(f"body exceeds sensor: bounding box side {side} > {GAMMAS[-1]}")


def to_s1(image: np.ndarray, labels: LabelSet | None, blob: BlobResult, rng_seed: int,
          alpha: tuple[int, int] | None = None):
    """Crop to the blob box and pad at a random offset to a gamma x gamma square.

    Padding pixels are copied from the S0 image at the matching coordinates;
    where those fall off the sensor they are zero. ``alpha`` overrides the
    random draw.
    """
    u0, v0, w, h = blob.bbox
    gamma = choose_gamma(w, h)
    if alpha is None:
        rng = np.random.default_rng(rng_seed)
        au = int(rng.integers(0, gamma - w + 1))
        av = int(rng.integers(0, gamma - h + 1))
    else:
        au, av = (int(a) for a in alpha)
        if not (0 <= au <= gamma - w and 0 <= av <= gamma - h):
            raise ValueError(f"pad offsets {alpha} outside [0, {gamma - w}] x [0, {gamma - h}]")

    # S1 pixel (x, y) <- S0 pixel (x + u0 - au, y + v0 - av)
    src_u0, src_v0 = u0 - au, v0 - av
    H, W = image.shape
    out = np.zeros((gamma, gamma), dtype=image.dtype)
    su0, sv0 = max(src_u0, 0), max(src_v0, 0)
    su1, sv1 = min(src_u0 + gamma, W), min(src_v0 + gamma, H)
    if su1 > su0 and sv1 > sv0:
        out[sv0 - src_v0 : sv1 - src_v0, su0 - src_u0 : su1 - src_u0] = image[sv0:sv1, su0:su1]

    record = PreprocessRecord(blob, gamma, au, av, seed=rng_seed)
    labels_s1 = labels.shifted(record.offset) if labels is not None else None
    return out, labels_s1, record


@dataclass
class NoiseSpec:
    sigma: float = 2.0 / 255.0
    seed: int = 0

    def apply(self, image: np.ndarray) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return np.clip(image + rng.normal(0.0, self.sigma, size=image.shape), 0.0, 1.0)


@dataclass
class S2Sample:
    image: np.ndarray
    labels: LabelSet
    record: PreprocessRecord


def _tent_matrix(n_in: int, n_out: int = S2_SIZE) -> np.ndarray:
    f = n_in / n_out
    x = np.arange(n_in)[None, :]
    j = np.arange(n_out)[:, None]
    w = np.clip(1.0 - np.abs(x - j * f) / f, 0.0, None)
    return w / f


def resize_to_s2(image: np.ndarray) -> np.ndarray:
    """Bilinear (tent-filtered) downsampling to 128x128.

    Output pixel j is centred on input coordinate j * gamma / 128, the same
    mapping the labels follow. The tent weights form a partition of unity that
    reproduces linear functions, so the intensity-weighted centroid of the
    image maps exactly onto the scaled centroid.
    """
    h, w = image.shape
    if (h, w) == (S2_SIZE, S2_SIZE):
        return image.astype(float, copy=True)
    return _tent_matrix(h) @ image @ _tent_matrix(w).T


def to_s2(image_s1: np.ndarray, labels_s1: LabelSet | None, record: PreprocessRecord,
          noise: NoiseSpec | None = None) -> S2Sample:
    if image_s1.shape != (record.gamma, record.gamma):
        raise ValueError(f"S1 image shape {image_s1.shape} does not match gamma={record.gamma}")
    img = image_s1.astype(float)
    if noise is not None:
        img = noise.apply(img)
        record.noise_applied = True
    img = np.clip(resize_to_s2(img), 0.0, 1.0)
    labels_s2 = labels_s1.scaled(record.scale) if labels_s1 is not None else None
    return S2Sample(img, labels_s2, record)


def invert_labels(labels_s2: LabelSet, record: PreprocessRecord) -> LabelSet:
    """Undo the S1 -> S2 scaling: lengths times gamma/128, angles unchanged."""
    return labels_s2.scaled(record.gamma / S2_SIZE)


def s2_labels(labels_s0: LabelSet, record: PreprocessRecord) -> LabelSet:
    """S0 labels -> S2 labels, given the record of that image."""
    return labels_s0.shifted(record.offset).scaled(record.scale)


def preprocess_image(image: np.ndarray, seed: int, noise: NoiseSpec | None = None,
                     labels: LabelSet | None = None, weighted: bool = True) -> S2Sample:
    """Full S0 -> S2 pipeline for one image."""
    blob = blob_analysis(image, weighted=weighted)
    s1, labels_s1, record = to_s1(image, labels, blob, seed)
    return to_s2(s1, labels_s1, record, noise)


@dataclass
class PreparedSet:
    """A batch of S2 images with their labels, records and S0 ground truth."""

    images: np.ndarray  # (n, 128, 128) float32
    labels: np.ndarray  # (n, 3) raw S2 labels for ``strategy``
    records: list[PreprocessRecord]
    truths: list
    strategy: LabelStrategy
    ids: np.ndarray | None = None
    camera: object = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx) -> "PreparedSet":
        idx = np.asarray(idx)
        return PreparedSet(self.images[idx], self.labels[idx], [self.records[i] for i in idx],
                           [self.truths[i] for i in idx], self.strategy, self.ids[idx], self.camera)

    def with_strategy(self, strategy: LabelStrategy) -> "PreparedSet":
        labels = np.array([s2_labels(t.labels(strategy), r).values for t, r in zip(self.truths, self.records)])
        return PreparedSet(self.images, labels, self.records, self.truths, strategy, self.ids, self.camera)


def save_prepared(prepared: PreparedSet, out_dir, splits: list[str] | None = None) -> None:
    """Raw little-endian f32 tensor (count x 128 x 128), labels CSV and records CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.asarray(prepared.images, dtype="<f4").tofile(out / "images.f32")
    cols = prepared.strategy.columns
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "split", *cols])
        for i, (sid, row) in enumerate(zip(prepared.ids, prepared.labels)):
            w.writerow([int(sid), splits[i] if splits else "", *(repr(float(x)) for x in row)])
    with open(out / "records.csv", "w", newline="") as fh:
        rows = [r.as_row() for r in prepared.records]
        w = csv.DictWriter(fh, fieldnames=["id", *rows[0]])
        w.writeheader()
        for sid, r in zip(prepared.ids, rows):
            w.writerow({"id": int(sid), **r})
