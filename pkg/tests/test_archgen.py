import numpy as np
import pytest
from hypothesis import given, strategies as st

from celmnav.archgen import (ArchSpec, C_GRID, cnn_grid, count_params, desk_grid, enumerate_specs, export_grid_csv,
                             layer_table, read_grid_csv, reference_best_theta, save_spec)
from celmnav.labels import LabelStrategy

# layer rows of the reference d=5 network: (name, type, output shape, params)
D5_LAYERS = [
    ("I", "InputLayer", (128, 128, 1), 0),
    ("C1", "Conv2D", (128, 128, 16), 160), ("A1", "Activation", (128, 128, 16), 0), ("P1", "Pooling", (64, 64, 16), 0),
    ("C2", "Conv2D", (64, 64, 32), 4640), ("A2", "Activation", (64, 64, 32), 0), ("P2", "Pooling", (32, 32, 32), 0),
    ("C3", "Conv2D", (32, 32, 64), 18496), ("A3", "Activation", (32, 32, 64), 0), ("P3", "Pooling", (16, 16, 64), 0),
    ("C4", "Conv2D", (16, 16, 128), 73856), ("A4", "Activation", (16, 16, 128), 0), ("P4", "Pooling", (8, 8, 128), 0),
    ("C5", "Conv2D", (8, 8, 256), 295168), ("A5", "Activation", (8, 8, 256), 0), ("P5", "Pooling", (4, 4, 256), 0),
    ("FC", "Flattening", (4096,), 0),
    ("O", "Dense", (3,), 12291),
]
CUMULATIVE = [160, 4800, 23296, 97152, 392320]


def test_depth5_layer_rows():
    assert layer_table(ArchSpec(5)) == D5_LAYERS


@pytest.mark.parametrize("d", [1, 2, 3, 4, 5])
def test_cumulative_counts(d):
    assert count_params(ArchSpec(d)).encoder_total == CUMULATIVE[d - 1]


def test_depth5_details():
    pc = count_params(ArchSpec(5))
    assert pc.weights[-1] + pc.biases[-1] == 295168
    assert pc.n_fc == 4096 and pc.head_total == 12291


def test_enumerate_counts():
    specs = enumerate_specs()
    assert len(specs) == 120 and len({s.key for s in specs}) == 120
    assert len(specs) * 3 == 360
    assert specs == sorted(specs, key=lambda s: s.sort_key)
    assert all(s.n_out == 4 for s in enumerate_specs(LabelStrategy.W_SPH))
    assert all(s.n_out == 3 for s in enumerate_specs(LabelStrategy.AS_CART))


def test_desk_and_cnn_grids():
    assert len(desk_grid()) == 12
    assert len(cnn_grid()) == 45
    assert len(cnn_grid((64,), (1e-3, 1e-4), 1)) == 2
    assert len(C_GRID) == 9 and C_GRID[0] == 1e-4 and C_GRID[-1] == 1e4


def test_spec_validation():
    with pytest.raises(ValueError):
        ArchSpec(6)
    with pytest.raises(ValueError):
        ArchSpec(1, activation="gelu")
    with pytest.raises(ValueError):
        ArchSpec(1, n_out=5)


def test_spec_dict_roundtrip(tmp_path):
    s = ArchSpec(3, "normal", "nrelu", "max", n_out=4, batch_size=128, lr=1e-2)
    assert ArchSpec.from_dict(s.to_dict()) == s
    bad = s.to_dict()
    bad["format_version"] = 99
    with pytest.raises(ValueError):
        ArchSpec.from_dict(bad)
    save_spec(s, tmp_path / "s.json")


def test_grid_csv_roundtrip(tmp_path):
    specs = desk_grid()
    export_grid_csv(specs, [64, 65], tmp_path / "g.csv")
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert len(rows) == 1 + 24
    back, seeds = read_grid_csv(tmp_path / "g.csv")
    assert back == specs and seeds == [64, 65]


def test_reference_fixture_loads():
    rows = reference_best_theta()
    assert len(rows) == 20
    assert {r["dataset"][0] for r in rows} == set("DHLP")


@given(d=st.integers(2, 5))
def test_count_additivity(d):
    a, b = count_params(ArchSpec(d)), count_params(ArchSpec(d - 1))
    assert a.encoder_total - b.encoder_total == a.weights[-1] + a.biases[-1]
    assert a.weights[-1] == 9 * 2 ** (3 + d) * 2 ** (2 + d)
