import numpy as np
import pytest

from fdcheck import max_rel_error, small_problem

from celmnav.archgen import ArchSpec
from celmnav.elm import train_celm
from celmnav.gd import AdamState, TrainConfig, loss_and_grad, train_cnn, train_hybrid
from celmnav.neural import HeadParams, ModelParams, init_kernels


def test_zero_residual_zero_gradient():
    spec, params, x, _ = small_problem("tanh", "mean")
    from celmnav.neural import encode, head_output

    t = head_output(encode(x, params, spec), params.head)
    loss, grads = loss_and_grad(x, t, params, spec)
    assert loss == pytest.approx(0.0, abs=1e-20)
    assert all(np.abs(g).max() < 1e-12 for g in grads.arrays())


def test_head_gradient_linear_model():
    spec, params, x, t = small_problem("relu", "max")
    from celmnav.neural import encode

    f = encode(x, params, spec)
    _, grads = loss_and_grad(x, t, params, spec)
    resid = f @ params.head.beta + params.head.beta0 - t
    assert np.allclose(grads.head.beta, 2 * f.T @ resid / resid.size)
    assert np.allclose(grads.head.beta0, 2 * resid.sum(0) / resid.size)


@pytest.mark.parametrize("act,pool", [("tanh", "mean"), ("relu", "max")])
def test_gradient_matches_finite_differences(act, pool):
    spec, params, x, t = small_problem(act, pool, seed=1)
    assert max_rel_error(spec, params, x, t) < 1e-4


def test_adam_zero_gradient_leaves_params():
    spec, params, _, _ = small_problem("tanh", "mean")
    before = [a.copy() for a in params.arrays()]
    zero = ModelParams([type(l)(np.zeros_like(l.W), np.zeros_like(l.b)) for l in params.layers],
                       HeadParams(np.zeros_like(params.head.beta), np.zeros_like(params.head.beta0)))
    AdamState().update(params, zero, 1e-2)
    assert all(np.array_equal(a, b) for a, b in zip(before, params.arrays()))


def test_adam_first_step_is_lr_sign():
    spec, params, _, _ = small_problem("tanh", "mean")
    g = params.copy()
    before = params.copy()
    AdamState().update(params, g, 1e-3)
    for a, b, gg in zip(params.arrays(), before.arrays(), g.arrays()):
        nz = np.abs(gg) > 1e-3  # eps is negligible here
        assert np.allclose((b - a)[nz], 1e-3 * np.sign(gg[nz]), rtol=1e-4)


SMALL = ArchSpec(5, "normal", "tanh", "mean")


def test_training_deterministic(tiny_data):
    cfg = TrainConfig(batch_size=20, lr=1e-3, epochs=2, seed=3)
    a = train_cnn(tiny_data.train, tiny_data.val, SMALL, cfg)
    b = train_cnn(tiny_data.train, tiny_data.val, SMALL, cfg)
    assert a.epoch == b.epoch
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays(), b.params.arrays()))
    assert [h["epoch"] for h in a.history] == [0, 1, 2]


def test_zero_epochs_returns_initialisation(tiny_data):
    cfg = TrainConfig(batch_size=20, epochs=0, seed=4)
    ck = train_cnn(tiny_data.train, tiny_data.val, SMALL, cfg)
    init = init_kernels(SMALL, 4)
    assert ck.epoch == 0
    assert all(np.allclose(x, y.astype(np.float32), atol=0) for x, y in zip(ck.params.arrays(), init.arrays()))


def test_overfits_small_set(tiny_data):
    tr = tiny_data.train.subset(range(8))
    ck = train_cnn(tr, tr, SMALL, TrainConfig(batch_size=8, lr=1e-2, epochs=100, seed=0))
    assert ck.val_loss < 1e-3


def test_batch_larger_than_set_raises(tiny_data):
    with pytest.raises(ValueError):
        train_cnn(tiny_data.train, tiny_data.val, SMALL, TrainConfig(batch_size=1000, epochs=1))


def test_redraw_without_source_raises(tiny_data):
    with pytest.raises(ValueError):
        train_cnn(tiny_data.train, tiny_data.val, SMALL, TrainConfig(batch_size=20, epochs=1, redraw_padding=True))


def test_hybrid_freezes_encoder(tiny_data):
    ck = train_cnn(tiny_data.train, tiny_data.val, SMALL, TrainConfig(batch_size=20, epochs=1, seed=1))
    digest = ck.params.encoder_digest()
    hy = train_hybrid(ck, tiny_data.train, tiny_data.val)
    assert hy.params.encoder_digest() == digest == ck.params.encoder_digest()
    assert hy.result.beta.shape == (4096, 3) and hy.method == "HCELM"


def test_hybrid_of_untrained_source_equals_celm(tiny_data):
    ck = train_cnn(tiny_data.train, tiny_data.val, SMALL, TrainConfig(batch_size=20, epochs=0, seed=6))
    hy = train_hybrid(ck, tiny_data.train, tiny_data.val)
    celm = train_celm(tiny_data.train, tiny_data.val, ck.params, SMALL)
    assert hy.result.C == celm.C
    assert np.allclose(hy.result.beta, celm.beta, rtol=1e-6, atol=1e-8)


def test_hybrid_spec_mismatch(tiny_data):
    ck = train_cnn(tiny_data.train, tiny_data.val, SMALL, TrainConfig(batch_size=20, epochs=0))
    with pytest.raises(ValueError):
        train_hybrid(ck, tiny_data.train, tiny_data.val, spec=ArchSpec(4, "normal", "tanh", "mean"))
