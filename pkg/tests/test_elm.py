import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from celmnav.archgen import ArchSpec
from celmnav.elm import (DegenerateNormalizerError, Normalizer, RidgeSolver, assemble_H, solve_beta, solve_beta_branch,
                         train_celm)
from celmnav.labels import encode_targets
from celmnav.navmetrics import mean_eps_n
from celmnav.neural import init_kernels
from celmnav.search import mean_label_baseline


def ridge_oracle(H, T, C):
    """Normal equations solved with a generic dense solver."""
    return np.linalg.solve(H.T @ H + np.eye(H.shape[1]) / C, H.T @ T)


def test_identity_hidden_large_C():
    T = np.arange(15.0).reshape(5, 3)
    assert np.allclose(solve_beta(np.eye(5), T, 1e12), T, atol=1e-9)


def test_primal_matches_oracle(rng):
    H, T = rng.normal(size=(20, 8)), rng.normal(size=(20, 3))
    assert np.allclose(solve_beta(H, T, 10.0), ridge_oracle(H, T, 10.0), atol=1e-8)
    assert not RidgeSolver(H, T).dual


def test_dual_and_primal_agree(rng):
    H, T = rng.normal(size=(8, 20)), rng.normal(size=(8, 3))
    assert RidgeSolver(H, T).dual
    a = solve_beta_branch(H, T, 3.0, dual=True)
    b = solve_beta_branch(H, T, 3.0, dual=False)
    assert np.allclose(a, b, atol=1e-10) and np.allclose(solve_beta(H, T, 3.0), a, atol=1e-10)


def test_objective_gradient_zero(rng):
    H, T, C = rng.normal(size=(12, 30)), rng.normal(size=(12, 2)), 0.7
    beta = solve_beta(H, T, C)
    grad = beta / C + H.T @ (H @ beta - T)
    assert np.abs(grad).max() < 1e-9


def test_norm_shrinks_with_smaller_C(rng):
    H, T = rng.normal(size=(15, 6)), rng.normal(size=(15, 3))
    norms = [np.linalg.norm(solve_beta(H, T, C)) for C in (1e4, 1e2, 1, 1e-2, 1e-4)]
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_solver_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        RidgeSolver(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
    with pytest.raises(ValueError):
        RidgeSolver(rng.normal(size=(4, 3)), rng.normal(size=(4, 3))).solve(0.0)


def test_normalizer():
    n = Normalizer.fit([[0.0, 10.0], [2.0, 20.0]])
    assert np.allclose(n.transform([[1.0, 15.0]]), [[0.5, 0.5]])
    assert np.allclose(n.inverse(n.transform([[3.0, 7.0]])), [[3.0, 7.0]])
    with pytest.raises(DegenerateNormalizerError):
        Normalizer.fit([[1.0, 2.0], [1.0, 3.0]])


def test_single_sample_hidden_matrix():
    spec = ArchSpec(5, "normal", "tanh", "mean")
    H = assemble_H(np.zeros((1, 128, 128), np.float32), init_kernels(spec, 0), spec)
    assert H.shape == (1, 4096)


def test_train_celm_grid_and_solves(tiny_data):
    spec = ArchSpec(5, "normal", "tanh", "mean")
    res = train_celm(tiny_data.train, tiny_data.val, init_kernels(spec, 0, celm=True), spec)
    assert len(res.scores) == 9 and res.n_solves == 9 and res.n_assemblies == 1
    assert res.val_score == min(res.scores.values())
    assert res.beta.shape == (4096, 3)


def test_one_element_grid(tiny_data):
    spec = ArchSpec(5, "uniform", "relu", "max")
    res = train_celm(tiny_data.train, tiny_data.val, init_kernels(spec, 1, celm=True), spec, c_grid=[1.0])
    assert res.C == 1.0 and res.n_solves == 1
    with pytest.raises(ValueError):
        train_celm(tiny_data.train, tiny_data.val, init_kernels(spec, 1, celm=True), spec, c_grid=[])


def test_ties_pick_smaller_C(tiny_data):
    # a zero encoder gives identical predictions for every C
    spec = ArchSpec(5, "orthogonal", "relu", "mean")
    p = init_kernels(spec, 0, celm=True)
    for layer in p.layers:
        layer.W[:] = 0
    res = train_celm(tiny_data.train, tiny_data.val, p, spec, c_grid=[1e2, 1e-2, 1.0])
    assert res.C == 1e-2


def test_validation_on_train_beats_mean_baseline(tiny_data):
    spec = ArchSpec(3, "normal", "tanh", "max")
    tr = tiny_data.train
    res = train_celm(tr, tr, init_kernels(spec, 2, celm=True), spec)
    base = mean_eps_n(mean_label_baseline(tiny_data, split="train"))
    assert res.val_score <= base


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 12), L=st.integers(2, 12), C=st.sampled_from([1e-3, 1e-1, 1.0, 1e2]), seed=st.integers(0, 999))
def test_branches_agree_property(n, L, C, seed):
    r = np.random.default_rng(seed)
    H, T = r.normal(size=(n, L)), r.normal(size=(n, 2))
    assert np.allclose(solve_beta_branch(H, T, C, True), solve_beta_branch(H, T, C, False), atol=1e-7)
    assert np.allclose(solve_beta(H, T, C), ridge_oracle(H, T, C), atol=1e-7)
