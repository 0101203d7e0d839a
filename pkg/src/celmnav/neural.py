"""Numpy tensor ops for the shared encoder/head architecture.

Tensors are channels-last. Every op accepts a single ``(h, w, c)`` tensor or
a batch ``(n, h, w, c)``; batches are what the trainers use.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .archgen import ArchSpec

ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0),
    # negative ReLU: keeps the negative part
    "nrelu": lambda x: np.minimum(x, 0),
    "tanh": np.tanh,
    "none": lambda x: x,
}


@dataclass
class LayerParams:
    W: np.ndarray  # (3, 3, c_in, c_out)
    b: np.ndarray  # (c_out,)

    def __post_init__(self):
        if self.W.ndim != 4 or self.W.shape[:2] != (3, 3):
            raise ValueError(f"kernel must be 3x3xCinxCout, got {self.W.shape}")
        if self.b.shape != (self.W.shape[3],):
            raise ValueError(f"bias shape {self.b.shape} does not match {self.W.shape[3]} kernels")


@dataclass
class HeadParams:
    beta: np.ndarray  # (L, n_out)
    beta0: np.ndarray | None = None


@dataclass
class ModelParams:
    layers: list[LayerParams]
    head: HeadParams

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[3] != b.W.shape[2]:
                raise ValueError("layer channel counts do not chain")

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        out.append(self.head.beta)
        if self.head.beta0 is not None:
            out.append(self.head.beta0)
        return out

    def encoder_digest(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(np.ascontiguousarray(layer.W).tobytes())
            h.update(np.ascontiguousarray(layer.b).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParams":
        return ModelParams(
            [LayerParams(l.W.copy(), l.b.copy()) for l in self.layers],
            HeadParams(self.head.beta.copy(), None if self.head.beta0 is None else self.head.beta0.copy()),
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            [LayerParams(l.W.astype(dtype), l.b.astype(dtype)) for l in self.layers],
            HeadParams(self.head.beta.astype(dtype), None if self.head.beta0 is None else self.head.beta0.astype(dtype)),
        )


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (h, w, c) or (n, h, w, c), got shape {x.shape}")


def im2col(x: np.ndarray) -> np.ndarray:
    """(n, h, w, c) -> (n*h*w, c*9) patches of the zero-padded input."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, h, w, c, 3, 3)
    return cols.reshape(n * h * w, c * 9)


def kernel_matrix(W: np.ndarray) -> np.ndarray:
    """(3, 3, c_in, c_out) -> (c_in*9, c_out), matching :func:`im2col` ordering."""
    return W.transpose(2, 0, 1, 3).reshape(-1, W.shape[3])


def conv2d_same(x: np.ndarray, layer: LayerParams, return_cols: bool = False):
    """Stride-1 3x3 cross-correlation with zero padding; spatial size preserved."""
    xb, single = _batched(x)
    n, h, w, c = xb.shape
    if c != layer.W.shape[2]:
        raise ValueError(f"input has {c} channels, kernel expects {layer.W.shape[2]}")
    cols = im2col(xb)
    out = (cols @ kernel_matrix(layer.W).astype(cols.dtype, copy=False)).reshape(n, h, w, -1) + layer.b.astype(cols.dtype, copy=False)
    out = out[0] if single else out
    return (out, cols) if return_cols else out


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def _windows(x: np.ndarray) -> np.ndarray:
    """(n, h, w, c) -> (n, h/2, w/2, c, 4) with window cells in row-major scan order."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"pooling needs even spatial dims, got {h}x{w}")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)


def pool2(x: np.ndarray, kind: str) -> np.ndarray:
    xb, single = _batched(x)
    win = _windows(xb)
    if kind == "mean":
        out = win.mean(axis=-1)
    elif kind == "max":
        out = win.max(axis=-1)
    else:
        raise ValueError(f"unknown pooling {kind!r}")
    return out[0] if single else out


def check_consistent(params: ModelParams, spec: ArchSpec) -> None:
    if len(params.layers) != spec.depth:
        raise ValueError(f"params have {len(params.layers)} layers, spec depth is {spec.depth}")
    for i, (layer, (cin, cout)) in enumerate(zip(params.layers, zip(spec.channels(), spec.channels()[1:]))):
        if layer.W.shape != (3, 3, cin, cout):
            raise ValueError(f"layer {i + 1} kernel {layer.W.shape} != {(3, 3, cin, cout)}")
    if params.head.beta.shape[1] != spec.n_out:
        raise ValueError(f"head has {params.head.beta.shape[1]} outputs, spec needs {spec.n_out}")


def encode(x: np.ndarray, params: ModelParams, spec: ArchSpec, cache: list | None = None) -> np.ndarray:
    """Run the encoder on a batch (n, h, w, 1) and return flattened features (n, L).

    Flattening is row-major over (height, width, channel). When ``cache`` is a
    list, per-level intermediates are appended for the backward pass.
    """
    a = x
    for layer in params.layers:
        z, cols = conv2d_same(a, layer, return_cols=True)
        y = activate(z, spec.activation)
        a_next = pool2(y, spec.pooling)
        if cache is not None:
            cache.append({"in_shape": a.shape, "cols": cols, "z": z, "y": y})
        a = a_next
    return a.reshape(a.shape[0], -1)


def head_output(features: np.ndarray, head: HeadParams) -> np.ndarray:
    out = features @ head.beta.astype(features.dtype, copy=False)
    if head.beta0 is not None:
        out = out + head.beta0
    return out


def forward(x: np.ndarray, params: ModelParams, spec: ArchSpec) -> tuple[np.ndarray, np.ndarray]:
    """Features and head output.

    ``x`` is one image (h, w) / (h, w, 1) or a batch (n, h, w, 1); the result
    has a leading batch axis only when the input had one.
    """
    check_consistent(params, spec)
    single = np.ndim(x) == 2 or (np.ndim(x) == 3 and np.shape(x)[-1] == 1)
    xb = np.asarray(x)
    if xb.ndim == 2:
        xb = xb[None, :, :, None]
    elif single:
        xb = xb[None]
    feats = encode(xb, params, spec)
    if params.head.beta.shape[0] != feats.shape[1]:
        raise ValueError(f"head expects {params.head.beta.shape[0]} features, encoder gives {feats.shape[1]}")
    out = head_output(feats, params.head)
    return (feats[0], out[0]) if single else (feats, out)


def features(images: np.ndarray, params: ModelParams, spec: ArchSpec, batch: int = 32,
             dtype=np.float32) -> np.ndarray:
    """Encoder features for a stack of gray images (n, h, w), computed in chunks."""
    images = np.asarray(images)
    n = images.shape[0]
    enc = params.astype(dtype)
    out = None
    for s in range(0, n, batch):
        chunk = images[s : s + batch].astype(dtype)[..., None]
        f = encode(chunk, enc, spec)
        if out is None:
            out = np.empty((n, f.shape[1]), dtype=dtype)
        out[s : s + batch] = f
    return out


def _orthogonal(rng, rows: int, cols: int) -> np.ndarray:
    """(rows, cols) matrix with orthonormal columns (or rows when cols > rows)."""
    transpose = cols > rows
    a = rng.normal(size=(cols, rows) if transpose else (rows, cols))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.T if transpose else q


def init_kernels(spec: ArchSpec, seed: int, celm: bool = False, input_size: int = 128) -> ModelParams:
    """Seeded kernels for ``spec.kernel_dist`` plus a small uniform head.

    Orthogonal kernels are built per level from a (9*c_in) x c_out matrix with
    orthonormal columns; their biases are zero. The head is drawn after the
    kernels, so the encoder does not depend on ``celm``. With ``celm`` the
    head carries no bias.
    """
    rng = np.random.default_rng(seed)
    layers = []
    chans = spec.channels()
    for cin, cout in zip(chans, chans[1:]):
        if spec.kernel_dist == "uniform":
            W = rng.uniform(-1.0, 1.0, size=(3, 3, cin, cout))
            b = rng.uniform(-1.0, 1.0, size=cout)
        elif spec.kernel_dist == "normal":
            W = rng.normal(0.0, 1.0, size=(3, 3, cin, cout))
            b = rng.normal(0.0, 1.0, size=cout)
        else:
            M = _orthogonal(rng, 9 * cin, cout)
            W = M.reshape(cin, 3, 3, cout).transpose(1, 2, 0, 3)
            b = np.zeros(cout)
        layers.append(LayerParams(W, b))
    L = (input_size >> spec.depth) ** 2 * chans[-1]
    lim = 1.0 / np.sqrt(L)
    beta = rng.uniform(-lim, lim, size=(L, spec.n_out))
    head = HeadParams(beta, None if celm else np.zeros(spec.n_out))
    return ModelParams(layers, head)


MAGIC = b"CELMNAV\0"
BLOB_VERSION = 1


def save_model(path, params: ModelParams, spec: ArchSpec, **meta) -> tuple[Path, Path]:
    """Versioned blob (magic, version, JSON header, little-endian f32 arrays) plus JSON sidecar."""
    path = Path(path)
    arrays = params.arrays()
    header = {
        "spec": spec.to_dict(),
        "shapes": [list(a.shape) for a in arrays],
        "has_beta0": params.head.beta0 is not None,
    }
    hbytes = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", BLOB_VERSION, len(hbytes)))
        fh.write(hbytes)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({**spec.to_dict(), **meta}, indent=1, default=_jsonable))
    return path, sidecar


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o)}")


def load_model(path) -> tuple[ModelParams, ArchSpec, dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a model blob")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != BLOB_VERSION:
        raise ValueError(f"unsupported blob version {version}")
    off += 8
    header = json.loads(data[off : off + hlen])
    off += hlen
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64))
        off += 4 * count
    spec = ArchSpec.from_dict(header["spec"])
    n_layers = spec.depth
    layers = [LayerParams(arrays[2 * i], arrays[2 * i + 1]) for i in range(n_layers)]
    beta = arrays[2 * n_layers]
    beta0 = arrays[2 * n_layers + 1] if header["has_beta0"] else None
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return ModelParams(layers, HeadParams(beta, beta0)), spec, meta
