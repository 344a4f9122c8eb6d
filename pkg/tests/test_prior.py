import numpy as np
import pytest
from numpy.testing import assert_allclose

from nctrl import prior as pf
from nctrl.autodiff import Tape
from nctrl.autodiff.gradcheck import max_grad_error
from nctrl.theory import jacobian_fd


def make(rng, n=3, C=2, lag=1, hidden=(8, 8)):
    flow = pf.PriorFlow(n, C, lag, d_theta=3, hidden=hidden)
    params = flow.init(rng)
    params["prior.logscale"] = rng.normal(scale=0.3, size=(C, n))
    return flow, params


def smooth_across_stencil(fn, z, step=1e-5, tol=1e-6):
    """Forward and backward differences agree, i.e. no activation kink within +-step."""
    f0 = fn(z)
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = step
        if np.max(np.abs((fn(z + e) - f0) - (f0 - fn(z - e)))) / step > tol:
            return False
    return True


def test_log_det_matches_dense_jacobian():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        lag = int(rng.integers(1, 3))
        flow, params = make(rng, n=n, C=3, lag=lag)
        z_hist = rng.normal(size=(lag, n))
        c = int(rng.integers(3))
        fn = lambda z: pf.residuals(flow, params, z, z_hist, c)[0]  # noqa: E731
        z_t = rng.normal(size=n)
        while not smooth_across_stencil(fn, z_t):  # the FD oracle is invalid at a kink
            z_t = rng.normal(size=n)
        J = jacobian_fd(fn, z_t)
        sign, dense = np.linalg.slogdet(J)
        tape = Tape(grad=False)
        P = {k: tape.const(v) for k, v in params.items()}
        got = flow.log_det(P, z_t[None], z_hist.reshape(1, -1), [c]).value[0]
        assert sign != 0
        assert abs(got - dense) <= 1e-5
        # the Jacobian over time-t coordinates is diagonal, hence triangular
        assert_allclose(J - np.diag(np.diag(J)), 0.0, atol=1e-7)


def test_diagonal_derivative_matches_finite_difference(rng):
    flow, params = make(rng)
    z_t, z_hist = rng.normal(size=3), rng.normal(size=(1, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1e-6
        fd = (pf.residuals(flow, params, z_t + e, z_hist, 1)[0][i]
              - pf.residuals(flow, params, z_t - e, z_hist, 1)[0][i]) / 2e-6
        assert_allclose(pf.diagonal_derivative(flow, params, z_t, z_hist, 1, i), fd, rtol=1e-6)


def test_density_integrates_to_one():
    rng = np.random.default_rng(4)
    flow, params = make(rng, n=1, C=2)
    # shrink the MLP so the residual map stays strictly increasing
    for k in params:
        if k.startswith("prior.f."):
            params[k] = params[k] * 0.3
    grid = np.linspace(-10, 10, 10000)
    tape = Tape(grad=False)
    P = {k: tape.const(v) for k, v in params.items()}
    hist = np.full((grid.size, 1), 0.4)
    for c in range(2):
        lp = flow.log_prob(P, grid[:, None], hist, np.full(grid.size, c)).value
        assert (flow.residuals(P, grid[:, None], hist, P["prior.theta"][np.full(grid.size, c)])[1].value > 0).all()
        assert_allclose(np.trapezoid(np.exp(lp), grid), 1.0, atol=1e-3)


def test_log_prob_gradcheck(rng):
    flow, params = make(rng, n=2, hidden=(4,))
    z = rng.normal(size=(5, 2))
    h = rng.normal(size=(5, 2))
    c = np.array([0, 1, 1, 0, 1])
    rel, abs_ = max_grad_error(lambda P: flow.log_prob(P, z, h, c).sum(), params)
    assert rel <= 1e-4 and abs_ <= 1e-7


def test_gradient_through_latents(rng):
    flow, params = make(rng, n=2, hidden=(4,))
    params = dict(params, z=rng.normal(size=(4, 2)), h=rng.normal(size=(4, 2)))
    c = np.array([0, 1, 0, 1])
    rel, abs_ = max_grad_error(lambda P: flow.log_prob(P, P["z"], P["h"], c).sum(), params)
    assert rel <= 1e-4 and abs_ <= 1e-7


def test_soft_labels_reduce_to_hard(rng):
    flow, params = make(rng)
    tape = Tape(grad=False)
    P = {k: tape.const(v) for k, v in params.items()}
    z, h = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    c = np.array([1, 0, 1, 1])
    hard = flow.log_prob(P, z, h, c).value
    soft = flow.log_prob_soft(P, z, h, np.eye(2)[c]).value
    assert_allclose(soft, hard)


def test_collapsed_component_raises(rng):
    flow, params = make(rng, hidden=(4,))
    params["prior.skip"] = np.zeros(3)
    for k in params:
        if k.startswith("prior.f."):
            params[k] = np.zeros_like(params[k])
    with pytest.raises(pf.PriorFlowError, match="underflow"):
        pf.prior_log_prob(flow, params, np.ones(3), np.ones((1, 3)), 0)


def test_permute_relabels_regimes(rng):
    flow, params = make(rng, C=3)
    perm = np.array([1, 2, 0])
    moved = pf.permute(params, perm)
    z, h = rng.normal(size=3), rng.normal(size=(1, 3))
    for k in range(3):
        assert_allclose(pf.prior_log_prob(flow, moved, z, h, k), pf.prior_log_prob(flow, params, z, h, perm[k]))
