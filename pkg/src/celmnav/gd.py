"""Mini-batch gradient descent (Adam) for the full network, and hybrid heads.

The backward pass is written by hand against the forward ops in
:mod:`celmnav.neural`. Loss is the mean squared error over normalised targets.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archgen import ArchSpec
from .elm import CelmModel, CelmResult, Normalizer, eps_n_scores, train_celm
from .labels import decode_targets, encode_targets
from .neural import (HeadParams, LayerParams, ModelParams, _windows, check_consistent, encode, head_output,
                     init_kernels, kernel_matrix, save_model)
from .preprocess import NoiseSpec, PreparedSet, to_s1, to_s2

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 300
    seed: int = 0
    dtype: str = "float32"
    redraw_padding: bool = False  # new pad offsets every epoch; needs the S0 images

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def _act_grad(z: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "nrelu":
        return (z < 0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - y * y
    return np.ones_like(z)


def _pool_backward(grad: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    n, h, w, c = y.shape
    if kind == "mean":
        g = np.repeat(np.repeat(grad, 2, axis=1), 2, axis=2) / 4.0
        return g
    win = _windows(y)
    # first maximum in scan order takes the whole gradient
    winner = np.argmax(win, axis=-1)
    mask = np.zeros_like(win)
    np.put_along_axis(mask, winner[..., None], 1.0, axis=-1)
    g = mask * grad[..., None]
    return g.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy : dy + h, dx : dx + w, :] += d[..., dy, dx]
    return dxp[:, 1:-1, 1:-1, :]


def loss_and_grad(x: np.ndarray, targets: np.ndarray, params: ModelParams, spec: ArchSpec):
    """MSE over normalised targets and its exact gradient.

    ``x`` is a batch (n, h, w, 1); ``targets`` is (n, n_out). Returns the loss
    and a :class:`ModelParams` holding the gradients.
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    cache: list = []
    feats = encode(x, params, spec, cache=cache)
    out = head_output(feats, params.head)
    diff = out - targets
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")

    dout = 2.0 * diff / diff.size
    dbeta = feats.T @ dout
    dbeta0 = dout.sum(axis=0) if params.head.beta0 is not None else None
    da = (dout @ params.head.beta.T.astype(dout.dtype, copy=False))
    last = cache[-1]["y"]
    da = da.reshape(last.shape[0], last.shape[1] // 2, last.shape[2] // 2, last.shape[3])

    grads: list[LayerParams] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        c = cache[i]
        layer = params.layers[i]
        dy = _pool_backward(da, c["y"], spec.pooling)
        dz = dy * _act_grad(c["z"], c["y"], spec.activation)
        dz_flat = dz.reshape(-1, dz.shape[-1])
        dWm = c["cols"].T @ dz_flat
        cin = layer.W.shape[2]
        dW = dWm.reshape(cin, 3, 3, -1).transpose(1, 2, 0, 3)
        db = dz_flat.sum(axis=0)
        grads[i] = LayerParams(dW, db)
        if i > 0:
            dcols = dz_flat @ kernel_matrix(layer.W).T.astype(dz_flat.dtype, copy=False)
            da = _col2im(dcols, c["in_shape"])
    return loss, ModelParams(grads, HeadParams(dbeta, dbeta0))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def update(self, params: ModelParams, grads: ModelParams, lr: float) -> None:
        p_arrays, g_arrays = params.arrays(), grads.arrays()
        if not self.m:
            self.m = [np.zeros_like(p) for p in p_arrays]
            self.v = [np.zeros_like(p) for p in p_arrays]
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for p, g, m, v in zip(p_arrays, g_arrays, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Checkpoint:
    params: ModelParams
    spec: ArchSpec
    epoch: int
    val_loss: float
    normalizer: Normalizer
    config: TrainConfig | None = None
    history: list[dict] = field(default_factory=list)
    val_eps_n: float | None = None

    def predict_labels(self, data: PreparedSet, batch: int = 64) -> np.ndarray:
        dtype = np.float32
        p = self.params.astype(dtype)
        outs = []
        for s in range(0, len(data), batch):
            f = encode(data.images[s : s + batch].astype(dtype)[..., None], p, self.spec)
            outs.append(head_output(f, p.head))
        y = np.concatenate(outs).astype(np.float64)
        return decode_targets(self.normalizer.inverse(y), data.strategy)

    def evaluate(self, data: PreparedSet) -> list:
        from . import navmetrics

        labels = self.predict_labels(data)
        est = navmetrics.estimate_positions(labels, data.records, data.truths, data.strategy, data.camera, "CNN")
        return navmetrics.compute_metrics(est, data.truths, data.strategy)

    def save(self, path, **meta):
        return save_model(path, self.params, self.spec, method="CNN", epoch=self.epoch, val_loss=self.val_loss,
                          val_eps_n=self.val_eps_n, normalizer=self.normalizer.to_dict(),
                          encoder_sha256=self.params.encoder_digest(),
                          batch_size=self.config.batch_size if self.config else None,
                          lr=self.config.lr if self.config else None, **meta)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "wall_time"])
            w.writeheader()
            w.writerows(self.history)


def _targets(data: PreparedSet, normalizer: Normalizer) -> np.ndarray:
    return normalizer.transform(encode_targets(data.labels, data.strategy))


def mse(data_x: np.ndarray, targets: np.ndarray, params: ModelParams, spec: ArchSpec, batch: int = 64) -> float:
    total = 0.0
    for s in range(0, data_x.shape[0], batch):
        f = encode(data_x[s : s + batch], params, spec)
        d = head_output(f, params.head) - targets[s : s + batch]
        total += float(np.sum(d * d))
    return total / targets.size


def redraw_images(train: PreparedSet, s0_source, seed: int, epoch: int, noise_sigma: float | None = None) -> np.ndarray:
    """Fresh S2 images with new pad offsets; S2 labels do not depend on the offsets."""
    out = np.empty_like(train.images)
    for i, (sid, rec) in enumerate(zip(train.ids, train.records)):
        img = s0_source(i)
        ss = np.random.SeedSequence([seed, int(sid), epoch]).generate_state(2)
        s1, _, r = to_s1(img, None, rec.blob, int(ss[0]))
        noise = NoiseSpec(noise_sigma, int(ss[1])) if noise_sigma else None
        out[i] = to_s2(s1, None, r, noise).image
    return out


def train_cnn(train: PreparedSet, val: PreparedSet, spec: ArchSpec, config: TrainConfig,
              params: ModelParams | None = None, log_path=None, s0_source=None,
              noise_sigma: float | None = None) -> Checkpoint:
    """Adam on shuffled mini-batches for ``config.epochs``; keep the best validation checkpoint.

    No early stopping: every epoch runs and the epoch with the lowest
    validation loss wins (epoch 0 is the initialisation). With
    ``config.redraw_padding`` the training images are re-padded each epoch
    from ``s0_source(i)``, which returns the S0 image of training sample i.
    """
    if config.redraw_padding and s0_source is None:
        raise ValueError("redraw_padding needs s0_source to rebuild the training images")
    if config.batch_size > len(train):
        raise ValueError(f"batch size {config.batch_size} exceeds training set size {len(train)}")
    dtype = np.dtype(config.dtype)
    if params is None:
        params = init_kernels(spec, config.seed)
    check_consistent(params, spec)
    params = params.astype(dtype)
    normalizer = Normalizer.fit(encode_targets(train.labels, train.strategy))
    xt = train.images.astype(dtype)[..., None]
    xv = val.images.astype(dtype)[..., None]
    tt = _targets(train, normalizer).astype(dtype)
    tv = _targets(val, normalizer).astype(dtype)

    rng = np.random.default_rng(config.seed)
    adam = AdamState()
    t0 = time.perf_counter()
    best_loss = mse(xv, tv, params, spec)
    best = Checkpoint(params.copy(), spec, 0, best_loss, normalizer, config)
    history = [{"epoch": 0, "train_loss": mse(xt, tt, params, spec), "val_loss": best_loss, "wall_time": 0.0}]
    for epoch in range(1, config.epochs + 1):
        if config.redraw_padding:
            xt = redraw_images(train, s0_source, config.seed, epoch, noise_sigma).astype(dtype)[..., None]
        order = rng.permutation(len(train))
        losses = []
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s : s + config.batch_size]
            try:
                loss, grads = loss_and_grad(xt[idx], tt[idx], params, spec)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{spec.key} epoch {epoch} batch {b}: {exc}") from None
            adam.update(params, grads, config.lr)
            losses.append(loss * len(idx))
        val_loss = mse(xv, tv, params, spec)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"{spec.key} epoch {epoch}: validation loss {val_loss}")
        history.append({"epoch": epoch, "train_loss": sum(losses) / len(train), "val_loss": val_loss,
                        "wall_time": time.perf_counter() - t0})
        if val_loss < best_loss:
            best_loss = val_loss
            best = Checkpoint(params.copy(), spec, epoch, val_loss, normalizer, config)
    best.history = history
    best.params = best.params.astype(np.float64)
    best.val_eps_n = float(np.mean(eps_n_scores(best.predict_labels(val), val)))
    if log_path is not None:
        best.write_log(log_path)
    return best


def train_hybrid(source: Checkpoint, train: PreparedSet, val: PreparedSet, spec: ArchSpec | None = None,
                 c_grid=None, method: str = "HCELM") -> CelmModel:
    """Freeze a trained encoder, drop its head and fit a least-squares head."""
    spec = spec or source.spec
    s = source.spec
    if (s.depth, s.activation, s.pooling) != (spec.depth, spec.activation, spec.pooling):
        raise ValueError(f"source encoder {s.key} does not match target spec {spec.key}")
    target = ArchSpec(spec.depth, spec.kernel_dist, spec.activation, spec.pooling, n_out=train.strategy.n_out)
    enc = ModelParams(source.params.layers, HeadParams(np.zeros((target.n_features, target.n_out)), None))
    kw = {} if c_grid is None else {"c_grid": c_grid}
    result: CelmResult = train_celm(train, val, enc, target, **kw)
    return CelmModel(enc, target, result, method)
