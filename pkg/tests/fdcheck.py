"""Central finite-difference oracle for the hand-written backward pass."""

import numpy as np

from celmnav.archgen import ArchSpec
from celmnav.gd import loss_and_grad
from celmnav.neural import HeadParams, ModelParams, _windows, encode, head_output, init_kernels


def small_problem(activation, pooling, seed=0, depth=2, size=8, n=2):
    spec = ArchSpec(depth, "uniform", activation, pooling)
    p = init_kernels(spec, seed, input_size=size)
    r = np.random.default_rng(seed)
    n_feat = p.head.beta.shape[0]
    # head scaled like the real init so the loss is O(1) and FD round-off stays small
    beta = r.normal(size=(n_feat, 3)) / np.sqrt(n_feat)
    params = ModelParams(p.layers, HeadParams(beta, r.normal(size=3))).astype(np.float64)
    x = r.uniform(size=(n, size, size, 1))
    t = r.uniform(size=(n, 3))
    return spec, params, x, t


def _loss_and_pattern(x, t, params, spec):
    """Loss plus the discrete state (relu signs, max-pool winners) that fixes the local linear piece."""
    cache: list = []
    d = head_output(encode(x, params, spec, cache=cache), params.head) - t
    pattern = []
    for c in cache:
        if spec.activation in ("relu", "nrelu"):
            pattern.append(c["z"] > 0)
        if spec.pooling == "max":
            pattern.append(np.argmax(_windows(c["y"]), axis=-1))
    return float(np.mean(d * d)), pattern


def _same(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def fd_report(spec, params, x, t, h=1e-4):
    """Worst relative error |fd - g| / max(|fd|, |g|, 1e-8) over every parameter.

    Parameters whose +-h step changes the piecewise-linear state (a relu sign
    or a max-pool winner) sit on a kink where no derivative exists; they are
    counted and skipped.
    """
    _, grads = loss_and_grad(x, t, params, spec)
    _, base = _loss_and_pattern(x, t, params, spec)
    worst, checked, skipped = 0.0, 0, 0
    for p, g in zip(params.arrays(), grads.arrays()):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up, pu = _loss_and_pattern(x, t, params, spec)
            flat[i] = old - h
            dn, pd = _loss_and_pattern(x, t, params, spec)
            flat[i] = old
            if not (_same(pu, base) and _same(pd, base)):
                skipped += 1
                continue
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8))
            checked += 1
    return {"max_rel_error": worst, "checked": checked, "skipped": skipped}


def max_rel_error(spec, params, x, t, h=1e-4):
    return fd_report(spec, params, x, t, h)["max_rel_error"]
