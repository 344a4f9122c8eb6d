import numpy as np
import pytest
from numpy.testing import assert_allclose

from nctrl import datagen as D
from nctrl import theory as TH
from nctrl.autodiff import Tape, gaussian_log_density


def linear_dyn(n=2, C=5, seed=0, noise=(0.05, 0.15)):
    return D.sample_dynamics(n, C, 1, np.random.default_rng(seed), kind="linear", noise=noise)


def permute_regimes(dyn, perm):
    params = {k: v[perm] for k, v in dyn.params.items()}
    return D.GroundTruthDynamics(dyn.kind, dyn.n, dyn.n_regimes, dyn.lag, params,
                                 dyn.noise_scale[perm], dyn.hidden, dyn.slope)


def test_eta_at_mode_and_one_sigma():
    dyn = linear_dyn(n=2, C=2, noise=(1.0, 1.0))
    hist = np.array([[0.3, -0.2]])
    mu = dyn.mean(hist, 1)[0]
    assert_allclose(TH.eta(dyn, 0, mu, hist, 1), -0.9189385332, atol=1e-9)
    assert_allclose(TH.eta(dyn, 1, mu + 1.0, hist, 1), -1.4189385332, atol=1e-9)


def test_eta_matches_gaussian_log_density(rng):
    dyn = D.sample_dynamics(3, 3, 1, rng)
    hist = rng.normal(size=(1, 3))
    z = rng.normal(size=3)
    tape = Tape(grad=False)
    for c in range(3):
        mu = dyn.mean(hist, c)[0]
        for k in range(3):
            ref = gaussian_log_density(tape.const(z[k:k + 1]), mu[k:k + 1],
                                       np.log(dyn.noise_scale[c, k:k + 1] ** 2)).value
            assert_allclose(TH.eta(dyn, k, z, hist, c), ref, rtol=1e-12)


def test_linear_cross_derivative_matches_analytic(rng):
    dyn = linear_dyn()
    z_t, z_prev = rng.normal(size=2), rng.normal(size=2)
    d = TH.eta_derivatives(dyn, z_t, z_prev)
    W = dyn.params["f.0.W"]  # (C, d_in, n)
    expected = np.transpose(W, (2, 0, 1)) / (dyn.noise_scale.T[:, :, None] ** 2)
    assert np.max(np.abs(d.d11 - expected)) <= 1e-4
    # constant variance: the third-derivative block is zero up to rounding
    assert np.max(np.abs(d.d21)) <= TH.roundoff_floor(dyn, z_t, z_prev)
    assert_allclose(d.d2, -1.0 / dyn.noise_scale.T ** 2, rtol=1e-6)


def test_matrix_shape_and_linear_pass(rng):
    dyn = linear_dyn()
    z = rng.normal(size=(2, 2))
    rep = TH.variability_vectors(dyn, z[0], z[1:])
    assert rep.matrix.shape == (4, 2 * 5 + 4)
    assert rep.passed == (rep.rank == 4)
    assert rep.passed
    assert sorted(rep.structural_zero_blocks) == [(k, c) for k in range(2) for c in range(5)]
    assert rep.to_json()["shape"] == [4, 14]


def test_single_regime_cannot_pass(rng):
    dyn = linear_dyn(n=2, C=1)
    rep = TH.variability_vectors(dyn, rng.normal(size=2), rng.normal(size=(1, 2)))
    assert rep.matrix.shape == (4, 2)
    assert not rep.passed


def test_lag_two_rejected(rng):
    dyn = D.sample_dynamics(2, 2, 2, rng, kind="linear")
    with pytest.raises(ValueError):
        TH.variability_vectors(dyn, np.zeros(2), np.zeros((2, 2)))


def test_non_finite_derivative_names_indices(rng):
    dyn = linear_dyn(n=2, C=2)
    dyn.params["f.0.W"][1, 0, 1] = np.nan
    with pytest.raises(TH.TheoryCheckError, match="k=1.*c=1"):
        TH.eta_derivatives(dyn, np.zeros(2), np.zeros(2))


def test_relabel_invariance(rng):
    dyn = linear_dyn(n=2, C=5, seed=3)
    perm = np.array([3, 0, 4, 1, 2])
    z_t, z_prev = rng.normal(size=2), rng.normal(size=(1, 2))
    a = TH.variability_vectors(dyn, z_t, z_prev)
    b = TH.variability_vectors(permute_regimes(dyn, perm), z_t, z_prev)
    assert a.passed == b.passed and a.rank == b.rank
    d_a = TH.eta_derivatives(dyn, z_t, z_prev[0])
    d_b = TH.eta_derivatives(permute_regimes(dyn, perm), z_t, z_prev[0])
    assert_allclose(d_b.d11, d_a.d11[:, perm], atol=1e-6)


def test_richardson_consistency(rng):
    dyn = D.sample_dynamics(2, 3, 1, rng)
    z_t, z_prev = rng.normal(size=2), rng.normal(size=2)
    a = TH.eta_derivatives(dyn, z_t, z_prev)
    b = TH.eta_derivatives(dyn, z_t, z_prev, outer=5e-4, inner=5e-4)
    for name in ("d1", "d2", "d11"):
        assert np.max(np.abs(getattr(a, name) - getattr(b, name))) <= 10 * 1e-4
    # the third-derivative block stays below the rounding floor at both steps
    assert np.max(np.abs(a.d21)) <= TH.roundoff_floor(dyn, z_t, z_prev)
    assert np.max(np.abs(b.d21)) <= TH.roundoff_floor(dyn, z_t, z_prev, 5e-4, 5e-4)


def test_rounding_noise_does_not_create_rank(rng):
    # the s-ring rows only carry C - 1 informative entries, so n = 8 > C - 1 fails
    dyn = linear_dyn(n=8, C=5, seed=2)
    rep = TH.variability_vectors(dyn, rng.normal(size=8), rng.normal(size=(1, 8)))
    assert rep.rank <= 8 + 4
    assert not rep.passed


def test_volume_orthogonal_and_compositions(rng):
    Q = D.random_orthogonal(6, rng)
    R = D.random_orthogonal(6, rng)
    assert TH.check_volume(lambda z: z @ Q, 16, 0, n=6).passed(1e-6)
    assert TH.check_volume(lambda z: (z @ Q) @ R, 16, 1, n=6).passed(1e-6)
    mixing = D.sample_mixing(D.MixingSpec.parse("orthogonal"), 5, rng)
    rep = TH.check_volume(mixing, 16, 2)
    assert rep.passed() and rep.max_deviation <= 1e-6
    assert np.all(rep.deviations >= 0)


def test_volume_scaled_coordinate(rng):
    Q = D.random_orthogonal(8, rng)
    scale = np.ones(8)
    scale[3] = 2.0
    rep = TH.check_volume(lambda z: (z @ Q) * scale, 16, 0, n=8)
    assert_allclose(rep.log_abs_det, np.log(2.0), atol=1e-8)
    assert not rep.passed()


def test_volume_singular_point_reported():
    rep = TH.check_volume(lambda z: np.array([z[0], 0.0 * z[1]]), 3, 0, n=2)
    assert rep.singular == [0, 1, 2]
    assert not rep.passed()


def test_volume_mlp_mixing_deviates():
    ds = D.generate(D.GenConfig(n=4, T=500, mixing=D.MixingSpec.parse("mlp:3"), seed=1))
    rep = TH.check_volume(ds.mixing, 16, 0, points=ds.z)
    assert rep.max_deviation > 0.1
    assert rep.to_json()["pass"] is False
