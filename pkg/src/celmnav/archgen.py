"""Procedural architecture space and exact parameter accounting.

Depth level i (1-based) has spatial size 2**(7 - i) after pooling and
2**(3 + i) kernels of size 3x3; the input is 128x128x1.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

from .labels import LabelStrategy

SPEC_FORMAT_VERSION = 1

DEPTHS = (1, 2, 3, 4, 5)
DISTRIBUTIONS = ("uniform", "normal", "orthogonal")
ACTIVATIONS = ("nrelu", "relu", "tanh", "none")
POOLINGS = ("mean", "max")
C_GRID = tuple(10.0**k for k in range(-4, 5))
BATCH_SIZES = (64, 128, 256)
LEARNING_RATES = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
INPUT_SIZE = 128


@dataclass(frozen=True)
class ArchSpec:
    depth: int
    kernel_dist: str = "orthogonal"
    activation: str = "relu"
    pooling: str = "mean"
    n_out: int = 3
    c_grid: tuple[float, ...] = C_GRID
    batch_size: int = 64
    lr: float = 1e-3

    def __post_init__(self):
        if self.depth not in DEPTHS:
            raise ValueError(f"depth must be in {DEPTHS}, got {self.depth}")
        if self.kernel_dist not in DISTRIBUTIONS:
            raise ValueError(f"unknown kernel distribution {self.kernel_dist!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.n_out not in (3, 4):
            raise ValueError("n_out must be 3 or 4")

    @property
    def sort_key(self) -> tuple:
        return (self.depth, DISTRIBUTIONS.index(self.kernel_dist),
                ACTIVATIONS.index(self.activation), POOLINGS.index(self.pooling))

    @property
    def key(self) -> str:
        return f"d{self.depth}-{self.kernel_dist}-{self.activation}-{self.pooling}"

    def channels(self) -> list[int]:
        """Kernel counts from the input (1) to the last depth level."""
        return [1] + [kernels_at(i) for i in range(1, self.depth + 1)]

    @property
    def n_features(self) -> int:
        return fc_size(self.depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["c_grid"] = list(self.c_grid)
        d["format_version"] = SPEC_FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        version = d.pop("format_version", SPEC_FORMAT_VERSION)
        if version != SPEC_FORMAT_VERSION:
            raise ValueError(f"unsupported spec format version {version}")
        d["c_grid"] = tuple(float(c) for c in d.get("c_grid", C_GRID))
        return cls(**d)


def spatial_at(i: int, input_size: int = INPUT_SIZE) -> int:
    return input_size >> i


def kernels_at(i: int) -> int:
    return 1 if i == 0 else 2 ** (3 + i)


def fc_size(depth: int, input_size: int = INPUT_SIZE) -> int:
    return spatial_at(depth, input_size) ** 2 * kernels_at(depth)


@dataclass
class ParamCount:
    weights: list[int]
    biases: list[int]
    n_fc: int
    head_beta: int
    head_beta0: int
    cumulative: list[int] = field(default_factory=list)

    @property
    def encoder_total(self) -> int:
        return self.cumulative[-1]

    @property
    def head_total(self) -> int:
        return self.head_beta + self.head_beta0

    @property
    def total(self) -> int:
        return self.encoder_total + self.head_total


def count_params(spec: ArchSpec) -> ParamCount:
    weights = [9 * kernels_at(i) * kernels_at(i - 1) for i in range(1, spec.depth + 1)]
    biases = [kernels_at(i) for i in range(1, spec.depth + 1)]
    cumulative = list(itertools.accumulate(w + b for w, b in zip(weights, biases)))
    n_fc = fc_size(spec.depth)
    return ParamCount(weights, biases, n_fc, n_fc * spec.n_out, spec.n_out, cumulative)


def layer_table(spec: ArchSpec) -> list[tuple[str, str, tuple[int, ...], int]]:
    """Keras-style summary rows: (name, type, output shape without batch, params)."""
    pc = count_params(spec)
    rows = [("I", "InputLayer", (INPUT_SIZE, INPUT_SIZE, 1), 0)]
    for i in range(1, spec.depth + 1):
        s_conv, s_pool, k = spatial_at(i - 1), spatial_at(i), kernels_at(i)
        rows.append((f"C{i}", "Conv2D", (s_conv, s_conv, k), pc.weights[i - 1] + pc.biases[i - 1]))
        rows.append((f"A{i}", "Activation", (s_conv, s_conv, k), 0))
        rows.append((f"P{i}", "Pooling", (s_pool, s_pool, k), 0))
    rows.append(("FC", "Flattening", (pc.n_fc,), 0))
    rows.append(("O", "Dense", (spec.n_out,), pc.head_total))
    return rows


def enumerate_specs(strategy: LabelStrategy | None = None, depths=DEPTHS, distributions=DISTRIBUTIONS,
                    activations=ACTIVATIONS, poolings=POOLINGS, **overrides) -> list[ArchSpec]:
    """Cartesian product of the architecture choices, in lexicographic order."""
    n_out = strategy.n_out if strategy is not None else 3
    specs = [
        ArchSpec(d, k, a, p, n_out=n_out, **overrides)
        for d, k, a, p in itertools.product(depths, distributions, activations, poolings)
    ]
    return sorted(specs, key=lambda s: s.sort_key)


def desk_grid(strategy: LabelStrategy | None = None) -> list[ArchSpec]:
    """Reduced grid: three depths, two activations, one distribution, both poolings."""
    return enumerate_specs(strategy, depths=(1, 2, 3), distributions=("orthogonal",),
                           activations=("relu", "tanh"), poolings=POOLINGS)


def cnn_grid(batch_sizes=BATCH_SIZES, lrs=LEARNING_RATES, runs: int = 3) -> list[tuple[int, float, int]]:
    return list(itertools.product(batch_sizes, lrs, range(runs)))


def export_grid_csv(specs: list[ArchSpec], seeds, path) -> Path:
    """One row per (spec, seed)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "depth", "kernel_dist", "activation", "pooling", "n_out", "seed"])
        for spec in specs:
            for seed in seeds:
                w.writerow([spec.key, spec.depth, spec.kernel_dist, spec.activation, spec.pooling, spec.n_out, seed])
    return path


def read_grid_csv(path) -> tuple[list[ArchSpec], list[int]]:
    specs, seeds = {}, []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            spec = ArchSpec(int(row["depth"]), row["kernel_dist"], row["activation"], row["pooling"], int(row["n_out"]))
            specs[spec.key] = spec
            if "seed" in row and row["seed"] != "" and int(row["seed"]) not in seeds:
                seeds.append(int(row["seed"]))
    return sorted(specs.values(), key=lambda s: s.sort_key), seeds or [0]


def save_spec(spec: ArchSpec, path, **extra) -> None:
    Path(path).write_text(json.dumps({**spec.to_dict(), **extra}, indent=1))


def reference_best_theta() -> list[dict]:
    """Published best hyper-parameters per dataset, for side-by-side comparison only."""
    text = resources.files("celmnav.data").joinpath("reference_best_theta.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    for r in rows:
        r["depth"] = int(r["depth"])
        r["C"] = float(r["C"])
        r["batch_size"] = int(r["batch_size"])
        r["lr"] = float(r["lr"])
    return rows


def with_training(spec: ArchSpec, batch_size: int, lr: float) -> ArchSpec:
    return replace(spec, batch_size=batch_size, lr=lr)
