"""Closed-form training of the head on top of a frozen convolutional encoder.

The head minimises ||beta||^2 + C ||H beta - T||^2. With N samples and L
features the solution is computed in whichever space is smaller:

    N <= L:  beta = H^T (I/C + H H^T)^-1 T
    N >  L:  beta = (I/C + H^T H)^-1 H^T T

Both systems are symmetric positive definite and are solved by Cholesky.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import navmetrics
from .archgen import C_GRID, ArchSpec
from .labels import LabelStrategy, decode_targets, encode_targets
from .neural import HeadParams, ModelParams, features as encoder_features, save_model
from .preprocess import PreparedSet

log = logging.getLogger(__name__)


class SolverError(LinAlgError):
    pass


class DegenerateNormalizerError(ValueError):
    pass


@dataclass
class Normalizer:
    """Per-component min-max scaling of targets to [0, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, targets: np.ndarray) -> "Normalizer":
        t = np.atleast_2d(np.asarray(targets, dtype=float))
        lo, hi = t.min(axis=0), t.max(axis=0)
        bad = np.flatnonzero(hi <= lo)
        if bad.size:
            raise DegenerateNormalizerError(f"target components {bad.tolist()} are constant over the training set")
        return cls(lo, hi)

    def transform(self, t):
        return (np.asarray(t, dtype=float) - self.lo) / (self.hi - self.lo)

    def inverse(self, y):
        return np.asarray(y, dtype=float) * (self.hi - self.lo) + self.lo

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["lo"], dtype=float), np.asarray(d["hi"], dtype=float))


@dataclass
class HiddenMatrix:
    H: np.ndarray
    spec_key: str = ""

    @property
    def shape(self):
        return self.H.shape


def assemble_H(images, params: ModelParams, spec: ArchSpec, batch: int = 32) -> HiddenMatrix:
    """Stack encoder features row by row, one row per image, in input order."""
    if isinstance(images, PreparedSet):
        images = images.images
    H = encoder_features(images, params, spec, batch=batch)
    finite = np.isfinite(H).all(axis=1)
    if not finite.all():
        raise ValueError(f"non-finite features for sample {int(np.flatnonzero(~finite)[0])} under {spec.key}")
    return HiddenMatrix(H, spec.key)


def _gram(H: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """H H^T accumulated in float64 over column chunks."""
    n = H.shape[0]
    G = np.zeros((n, n))
    for s in range(0, H.shape[1], chunk):
        block = H[:, s : s + chunk].astype(np.float64)
        G += block @ block.T
    return G


def _cholesky(A: np.ndarray, C: float):
    try:
        return cho_factor(A, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise SolverError(
            f"Cholesky factorisation failed at C={C:g}; the system is numerically singular, "
            f"use a larger 1/C (smaller C)"
        ) from exc


class RidgeSolver:
    """Factorisation-ready ridge problem for one H, reusable across C values."""

    def __init__(self, H, T):
        H = H.H if isinstance(H, HiddenMatrix) else H
        self.H = np.asarray(H)
        self.T = np.atleast_2d(np.asarray(T, dtype=float))
        if self.T.shape[0] != self.H.shape[0]:
            raise ValueError(f"H has {self.H.shape[0]} rows, T has {self.T.shape[0]}")
        self.N, self.L = self.H.shape
        self.dual = self.N <= self.L
        self.n_solves = 0
        if self.dual:
            self._A = _gram(self.H)
            self._rhs = self.T
        else:
            H64 = self.H.astype(np.float64)
            self._A = H64.T @ H64
            self._rhs = H64.T @ self.T

    def coefficients(self, C: float) -> np.ndarray:
        """Dual weights (N x m) when N <= L, otherwise beta itself."""
        if C <= 0:
            raise ValueError("C must be positive")
        A = self._A.copy()
        A[np.diag_indices_from(A)] += 1.0 / C
        self.n_solves += 1
        return cho_solve(_cholesky(A, C), self._rhs)

    def solve(self, C: float) -> np.ndarray:
        coef = self.coefficients(C)
        if self.dual:
            return self.H.T.astype(np.float64, copy=False) @ coef
        return coef


def solve_beta(H, T, C: float) -> np.ndarray:
    """Regularised least-squares head weights (L x m)."""
    return RidgeSolver(H, T).solve(C)


def solve_beta_branch(H, T, C: float, dual: bool) -> np.ndarray:
    """Force one of the two closed forms regardless of the N/L comparison."""
    H = np.asarray(H.H if isinstance(H, HiddenMatrix) else H, dtype=np.float64)
    T = np.atleast_2d(np.asarray(T, dtype=float))
    if dual:
        A = H @ H.T + np.eye(H.shape[0]) / C
        return H.T @ cho_solve(_cholesky(A, C), T)
    A = H.T @ H + np.eye(H.shape[1]) / C
    return cho_solve(_cholesky(A, C), H.T @ T)


def predict(feats: np.ndarray, beta: np.ndarray, normalizer: Normalizer, strategy: LabelStrategy) -> np.ndarray:
    """Raw S2 labels (n, 3) from encoder features."""
    y = np.atleast_2d(feats) @ beta
    return decode_targets(normalizer.inverse(y), strategy)


def eps_n_scores(labels_s2: np.ndarray, data: PreparedSet) -> np.ndarray:
    """Per-sample position error (% of range) for S2 label estimates."""
    est = navmetrics.estimate_positions(labels_s2, data.records, data.truths, data.strategy, data.camera)
    rows = navmetrics.compute_metrics(est, data.truths, data.strategy)
    return np.array([r.eps_n for r in rows])


@dataclass
class CelmResult:
    beta: np.ndarray
    C: float
    val_score: float
    normalizer: Normalizer
    scores: dict[float, float] = field(default_factory=dict)
    n_solves: int = 0
    n_assemblies: int = 0  # training hidden-matrix assemblies
    wall_time: float = 0.0

    def head(self) -> HeadParams:
        return HeadParams(self.beta, None)


def train_celm(train: PreparedSet, val: PreparedSet, params: ModelParams, spec: ArchSpec,
               c_grid=C_GRID, H_train: HiddenMatrix | None = None, H_val: HiddenMatrix | None = None) -> CelmResult:
    """Fit beta on ``train`` for every C, pick C by mean validation error.

    Ties go to the smaller C. Precomputed hidden matrices may be passed in to
    share one forward pass between runs.
    """
    c_grid = sorted(float(c) for c in c_grid)
    if not c_grid:
        raise ValueError("C grid is empty")
    t0 = time.perf_counter()
    n_assemblies = 0
    if H_train is None:
        H_train = assemble_H(train.images, params, spec)
        n_assemblies += 1
    if H_val is None:
        H_val = assemble_H(val.images, params, spec)
    targets = encode_targets(train.labels, train.strategy)
    normalizer = Normalizer.fit(targets)
    T = normalizer.transform(targets)
    solver = RidgeSolver(H_train, T)

    # predictions on val only need H_val H^T in the dual form
    cross = None
    if solver.dual:
        cross = np.zeros((H_val.H.shape[0], H_train.H.shape[0]))
        for s in range(0, H_train.H.shape[1], 8192):
            cross += H_val.H[:, s : s + 8192].astype(np.float64) @ H_train.H[:, s : s + 8192].astype(np.float64).T

    best = None
    scores = {}
    for C in c_grid:
        try:
            coef = solver.coefficients(C)
        except SolverError as exc:
            log.warning("%s: %s", spec.key, exc)
            scores[C] = float("inf")
            continue
        y = cross @ coef if solver.dual else H_val.H.astype(np.float64) @ coef
        labels = decode_targets(normalizer.inverse(y), val.strategy)
        score = float(np.mean(eps_n_scores(labels, val)))
        scores[C] = score
        if best is None or score < best[1]:
            best = (C, score, coef)
    if best is None:
        raise SolverError(f"no C in {c_grid} gave a solvable system for {spec.key}")
    C, score, coef = best
    beta = H_train.H.T.astype(np.float64) @ coef if solver.dual else coef
    return CelmResult(beta, C, score, normalizer, scores, solver.n_solves, n_assemblies, time.perf_counter() - t0)


@dataclass
class CelmModel:
    """Frozen encoder plus a least-squares head."""

    params: ModelParams
    spec: ArchSpec
    result: CelmResult
    method: str = "CELM"

    def predict_labels(self, data: PreparedSet, H: HiddenMatrix | None = None) -> np.ndarray:
        if H is None:
            H = assemble_H(data.images, self.params, self.spec)
        return predict(H.H.astype(np.float64), self.result.beta, self.result.normalizer, data.strategy)

    def evaluate(self, data: PreparedSet, H: HiddenMatrix | None = None) -> list:
        labels = self.predict_labels(data, H)
        est = navmetrics.estimate_positions(labels, data.records, data.truths, data.strategy, data.camera, self.method)
        return navmetrics.compute_metrics(est, data.truths, data.strategy)

    def save(self, path, **meta):
        params = ModelParams(self.params.layers, HeadParams(self.result.beta, None))
        return save_model(path, params, self.spec, method=self.method, C=self.result.C,
                          val_score=self.result.val_score, normalizer=self.result.normalizer.to_dict(),
                          encoder_sha256=self.params.encoder_digest(), **meta)
