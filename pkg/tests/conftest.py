import numpy as np
import pytest

from rosgas import numcore as nc

FD_STEP = 1e-4
REL_TOL = 1e-4


def finite_difference(loss_fn, params, h=FD_STEP):
    """Central differences of ``loss_fn()`` (a float) w.r.t. every entry of
    every param."""
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p.value[idx]
            p.value[idx] = old + h
            up = loss_fn()
            p.value[idx] = old - h
            down = loss_fn()
            p.value[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-5):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised over entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def analytic_grads(build_loss, params):
    nc.zero_grads(params)
    loss = build_loss()
    nc.backward(loss)
    return [p.grad.copy() for p in params]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sampled_kink_aware_error(build_loss, params, per_param=6, h=1e-6, seed=0):
    """Worst relative error over randomly sampled entries, accepting agreement
    with the central difference or either one-sided difference.

    Wide ReLU networks put some unit inputs right next to zero; a step that
    straddles such a kink makes the central difference average two slopes while
    the analytic gradient is one of them.
    """
    analytic = analytic_grads(build_loss, params)
    f0 = build_loss().item()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        for _ in range(per_param):
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            old = p.value[idx]
            p.value[idx] = old + h
            up = build_loss().item()
            p.value[idx] = old - h
            down = build_loss().item()
            p.value[idx] = old
            estimates = [(up - down) / (2 * h), (up - f0) / h, (f0 - down) / h]
            err = min(abs(ga[idx] - e) / max(abs(ga[idx]), abs(e), 1e-5) for e in estimates)
            worst = max(worst, err)
    return worst
