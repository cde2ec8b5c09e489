import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from s2ap.attacks import AttackConfig
from s2ap.diagnostics import (MaskTrace, SharpnessReport, flatten, hamming, hamming_trace, hvp,
                              lambda_max, loss_diff_grid, loss_diff_sharpness, unflatten)
from s2ap.losses import LossKind, craft

from conftest import fd_hessian, jacobi_eigenvalues, rel_err, surrogate_loss, tiny_net, tiny_problem


def _quadratic(h):
    h = np.asarray(h, dtype=np.float64)
    return lambda s: h @ s


def test_jacobi_oracle_on_known_spectrum():
    q = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))[0]
    a = q @ np.diag([3.0, -1.0, 0.5, 2.0]) @ q.T
    np.testing.assert_allclose(sorted(jacobi_eigenvalues(a)), [-1.0, 0.5, 2.0, 3.0], atol=1e-12)


def test_hvp_on_quadratic():
    np.testing.assert_allclose(hvp(_quadratic(np.diag([2.0, 1.0])), np.array([0.3, -0.7]), np.array([1.0, 0.0])),
                               [2.0, 0.0], rtol=0, atol=1e-6)


def test_hvp_is_linear_in_direction():
    _, _, _, fn, s0 = tiny_problem(1)
    v = np.random.default_rng(2).normal(size=s0.size)
    assert rel_err(hvp(fn, s0, 10 * v), 10 * hvp(fn, s0, v)) < 1e-5


def test_hvp_rejects_zero_direction():
    with pytest.raises(ValueError):
        hvp(_quadratic(np.eye(2)), np.ones(2), np.zeros(2))


@pytest.mark.parametrize("seed", range(3))
def test_hvp_matches_dense_fd_hessian(seed):
    net, x, y, fn, s0 = tiny_problem(seed, dims=(1, 2, 2))
    assert s0.size == 6
    hess = fd_hessian(lambda s: surrogate_loss(net, x, y, s0, s), s0)
    v = np.random.default_rng(seed).normal(size=s0.size)
    assert rel_err(hvp(fn, s0, v), hess @ v) < 1e-3


def test_surrogate_gradient_matches_numpy_loss():
    from conftest import central_diff
    net, x, y, fn, s0 = tiny_problem(4)
    assert rel_err(fn(s0), central_diff(lambda s: surrogate_loss(net, x, y, s0, s), s0)) < 1e-6


def test_lambda_max_known_spectrum():
    res = lambda_max(_quadratic(np.diag([2.0, 1.0])), np.array([0.5, 0.5]), iterations=50)
    assert abs(res.value - 2.0) <= 1e-6 and not res.flat


def test_lambda_max_flat_landscape():
    res = lambda_max(_quadratic(np.zeros((2, 2))), np.array([0.5, 0.5]))
    assert res.value == 0.0 and res.flat


def test_lambda_max_random_symmetric_matrix():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(8, 8))
    a = (a + a.T) / 2
    ev = jacobi_eigenvalues(a)
    dominant = ev[np.argmax(np.abs(ev))]
    res = lambda_max(_quadratic(a), rng.normal(size=8), iterations=50, seed=3)
    assert abs(res.value - dominant) <= 1e-3 * abs(dominant)


def test_lambda_max_sign_flip_invariance():
    _, _, _, fn, s0 = tiny_problem(5)
    v = np.random.default_rng(0).normal(size=s0.size)
    a = lambda_max(fn, s0, v0=v).value
    b = lambda_max(fn, s0, v0=-v).value
    assert abs(a - b) <= 1e-6 * max(1.0, abs(a))


@pytest.mark.parametrize("seed", range(4))
def test_lambda_max_matches_dense_eigensolver(seed):
    net, x, y, fn, s0 = tiny_problem(seed)
    ev = jacobi_eigenvalues(fd_hessian(lambda s: surrogate_loss(net, x, y, s0, s), s0))
    dominant = ev[np.argmax(np.abs(ev))]
    res = lambda_max(fn, s0, iterations=100, seed=seed)
    assert abs(res.value - dominant) <= 1e-2 * abs(dominant)


def test_lambda_max_needs_an_iteration():
    with pytest.raises(ValueError):
        lambda_max(_quadratic(np.eye(2)), np.ones(2), iterations=0)


@pytest.fixture
def sharp_setup(rng):
    net = tiny_net(rng, dims=(3, 8, 2))
    x = rng.uniform(size=(20, 3))
    y = rng.integers(0, 2, size=20)
    lk = LossKind("trades")
    x_adv = craft(net, x, y, lk, AttackConfig(), rng)
    return net, x, y, x_adv, lk


def test_loss_diff_at_zero_radius_is_zero(sharp_setup):
    assert loss_diff_sharpness(*sharp_setup, rho=0.0).value == 0.0


def test_loss_diff_is_non_negative_and_leaves_scores(sharp_setup):
    net = sharp_setup[0]
    s0 = [s.copy() for s in net.scores()]
    assert loss_diff_sharpness(*sharp_setup, rho=0.05, steps=5).value >= 0.0
    for a, b in zip(net.scores(), s0):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(3))
def test_loss_diff_grid_is_monotone(seed):
    rng = np.random.default_rng(seed)
    net = tiny_net(rng, dims=(3, 8, 2))
    x = rng.uniform(size=(20, 3))
    y = rng.integers(0, 2, size=20)
    grid = loss_diff_grid(net, x, y, None, LossKind("clean_ce"), rhos=(0.3, 0.01, 0.1, 0.0),
                          steps=5, seed=seed)
    vals = [grid[r] for r in sorted(grid)]
    assert list(grid) == sorted(grid) and vals[0] == 0.0
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_perturbation_box_respected(sharp_setup):
    net = sharp_setup[0]
    res = loss_diff_sharpness(*sharp_setup, rho=0.2, steps=5)
    for nu, s in zip(res.nu, net.scores()):
        assert np.all(np.abs(nu) <= 0.2 * (np.abs(s) + 1e-12) + 1e-15)


def test_hamming_examples():
    assert hamming([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5
    trace = MaskTrace.start([np.array([1, 0, 1, 1])])
    trace.append([np.array([1, 1, 1, 0])])
    trace.append([np.array([1, 0, 1, 1])])
    assert hamming_trace(trace) == [0.5, 0.0]


masks = st.integers(1, 64).flatmap(
    lambda n: st.tuples(st.lists(st.booleans(), min_size=n, max_size=n),
                        st.lists(st.booleans(), min_size=n, max_size=n)))


@settings(max_examples=300, deadline=None)
@given(masks)
def test_hamming_properties(pair):
    a, b = (np.array(p) for p in pair)
    h = hamming(a, b)
    assert 0.0 <= h <= 1.0
    assert hamming(a, a) == 0.0
    assert h == hamming(b, a)
    assert hamming(a, ~a) == 1.0


def test_hamming_trace_pairs_and_errors():
    t1 = MaskTrace.start([np.array([1, 1, 0, 0])])
    t2 = MaskTrace.start([np.array([1, 1, 0, 0])])
    t1.append([np.array([0, 1, 1, 0])])
    t2.append([np.array([1, 1, 0, 0])])
    h1, h2, diff = hamming_trace(t1, t2)
    assert (h1, h2, diff) == ([0.5], [0.0], [0.5])
    with pytest.raises(ValueError):
        hamming_trace(MaskTrace.start([np.ones(4)]))
    with pytest.raises(ValueError):
        hamming([1, 0], [1, 0, 1])
    with pytest.raises(ValueError):
        t1.append([np.ones(3)])


def test_mask_trace_packs_odd_lengths():
    m = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1], dtype=bool)
    trace = MaskTrace.start([m])
    np.testing.assert_array_equal(trace.unpack(trace.reference), m)


def test_flatten_round_trip(rng):
    like = [rng.normal(size=(2, 3)), rng.normal(size=(4,))]
    back = unflatten(flatten(like), like)
    for a, b in zip(like, back):
        np.testing.assert_array_equal(a, b)


def test_sharpness_report_dict():
    d = SharpnessReport([1.0, 2.0], {0.01: 0.5, 0.001: 0.1}).to_dict()
    assert list(d["loss_diff"]) == ["0.001", "0.01"] and d["maximizer"] == "pgd"
