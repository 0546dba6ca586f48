import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqboed.aldi import conjugate_posterior
from seqboed.eig import (
    EIGBounds,
    batch_standard_error,
    eig_exact_linear,
    eig_lower_gaussian,
    eig_lower_laplace,
    eig_nested_mc,
    eig_upper_gaussian,
    estimate_bounds,
    estimate_log_normalizer,
    fold_indices,
    laplace_maps,
    noise_block,
    simulate_joint,
)
from seqboed.forward_models import LinearModel, MatrixLinearModel, NearLinearModel, NearLinearModelConfig
from seqboed.gaussian_core import Gaussian, gaussian_log_density, sample_gaussian, substream


def _joint(prior, model, p, noise, J, seed, target=None):
    rng = substream(seed, "eig-test", p)
    return simulate_joint(sample_gaussian(prior, J, rng), model, p, noise, rng, target=target)


def test_exact_linear_value():
    a = LinearModel().matrix(1.0)
    assert eig_exact_linear(a, Gaussian(2.0, 2.0), 1.0) == pytest.approx(0.5 * math.log(19.0), abs=1e-14)


def test_exact_linear_multivariate_matches_formula():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 2))
    prior = Gaussian(np.zeros(2), np.diag([1.0, 2.0]))
    gamma = 0.5 * np.eye(3)
    expected = 0.5 * np.linalg.slogdet(np.eye(3) + np.linalg.solve(gamma, a @ prior.covariance @ a.T))[1]
    assert eig_exact_linear(a, prior, gamma) == pytest.approx(expected, rel=1e-12)


def test_noise_block_repeats_scalar_noise():
    nz = noise_block(Gaussian(0.0, 0.3), 3)
    np.testing.assert_array_equal(nz.covariance, 0.3 * np.eye(3))
    with pytest.raises(ValueError):
        noise_block(Gaussian(np.zeros(2), np.eye(2)), 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 500), st.integers(1, 12))
def test_folds_partition_samples(n, folds):
    if folds > 1 and n < 2 * folds:
        with pytest.raises(ValueError):
            fold_indices(n, folds)
        return
    pairs = fold_indices(n, folds)
    tests = np.concatenate([t for _, t in pairs])
    np.testing.assert_array_equal(np.sort(tests), np.arange(n))
    for train, test in pairs:
        if folds > 1:
            assert not np.intersect1d(train, test).size
            assert train.size + test.size == n


def test_batch_standard_error_iid():
    x = np.random.default_rng(3).standard_normal(100_000)
    assert batch_standard_error(x) == pytest.approx(1.0 / math.sqrt(x.size), rel=0.35)
    assert math.isnan(batch_standard_error(np.ones(1)))


def test_simulate_joint_without_target(linear_problem):
    prior, noise, model, _ = linear_problem
    js = _joint(prior, model, 1.0, noise, 100, 0)
    assert js.samples_y.shape == (100, 1)
    assert np.all(np.isnan(js.log_prior_seq))
    with pytest.raises(ValueError):
        eig_lower_gaussian(js)
    assert np.isfinite(eig_upper_gaussian(js))


@pytest.mark.parametrize("p", [0.0, 1.0, 2.0])
def test_linear_bounds_bracket_exact(linear_problem, p):
    prior, noise, model, target = linear_problem
    js = _joint(prior, model, p, noise, 20_000, 1, target)
    exact = eig_exact_linear(model.matrix(p), prior, 1.0)
    ub, se_ub = eig_upper_gaussian(js, return_se=True)
    lb, se_lb = eig_lower_gaussian(js, return_se=True)
    assert abs(ub - exact) <= 4 * se_ub + 0.01
    assert abs(lb - exact) <= 4 * se_lb + 0.01


def test_in_sample_and_cross_fitted_agree_at_large_J(linear_problem):
    prior, noise, model, target = linear_problem
    js = _joint(prior, model, 1.0, noise, 20_000, 2, target)
    assert eig_upper_gaussian(js, folds=1) == pytest.approx(eig_upper_gaussian(js), abs=1e-3)
    assert eig_lower_gaussian(js, folds=1) == pytest.approx(eig_lower_gaussian(js), abs=1e-3)


def test_laplace_maps_hit_conjugate_posterior_mean(linear_problem):
    prior, noise, model, target = linear_problem
    js = _joint(prior, model, 1.0, noise, 200, 3, target)
    maps, hess, conv, _ = laplace_maps(js, target)
    assert conv.all()
    for y, u, h in zip(js.samples_y[:20], maps[:20], hess[:20]):
        post = conjugate_posterior(prior, [model.matrix(1.0)], [y], 1.0)
        assert u[0] == pytest.approx(post.mean[0], abs=1e-6)
        assert h[0, 0] == pytest.approx(1.0 / post.covariance[0, 0], rel=1e-6)


def test_laplace_lower_bound_exact_for_linear(linear_problem):
    prior, noise, model, target = linear_problem
    js = _joint(prior, model, 1.0, noise, 20_000, 4, target)
    lbl, se, fallback = eig_lower_laplace(js, target, return_se=True)
    assert fallback == 0
    assert abs(lbl - 0.5 * math.log(19.0)) <= 4 * se


def test_laplace_on_multivariate_linear_model():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((2, 3))
    prior = Gaussian(np.ones(3), np.eye(3))
    noise = Gaussian(np.zeros(2), 0.2 * np.eye(2))
    from seqboed.aldi import SequentialTarget

    target = SequentialTarget(prior, noise)
    model = MatrixLinearModel(a)
    js = _joint(prior, model, 0.0, noise, 10_000, 6, target)
    exact = eig_exact_linear(a, prior, noise.covariance)
    lbl, se, _ = eig_lower_laplace(js, target, return_se=True)
    assert abs(lbl - exact) <= 4 * se


def test_estimate_bounds_triggers_laplace_only_above_delta(linear_problem):
    prior, noise, _, target = linear_problem
    model = NearLinearModel(NearLinearModelConfig(tau=1.0))
    js = _joint(prior, model, 1.0, noise, 2000, 7, target)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        wide = estimate_bounds(js, target, delta=10.0)
        tight = estimate_bounds(js, target, delta=1e-6)
    assert math.isnan(wide.lb_laplace) and wide.lower_method == "gaussian"
    assert np.isfinite(tight.lb_laplace)
    assert tight.lower == max(tight.lb_gauss, tight.lb_laplace)
    with pytest.warns(RuntimeWarning, match="gap"):
        estimate_bounds(js, target, delta=1e-6, laplace=False)
    with pytest.raises(ValueError):
        estimate_bounds(js, target, delta=0.0)


def test_eig_bounds_helpers():
    b = EIGBounds(1.0, 1.2, "gaussian", 10, se_lower=0.03, se_upper=0.04, log_normalizer=-0.5)
    assert b.gap == pytest.approx(0.2)
    assert b.combined_se == pytest.approx(0.05)
    assert b.lower_unnormalized == pytest.approx(1.5)
    assert b.ordered()
    assert not EIGBounds(1.0, 0.8, "gaussian", 10, se_lower=0.03, se_upper=0.04).ordered()


def test_nested_mc_converges_to_exact(linear_problem):
    prior, noise, model, _ = linear_problem
    est, se = eig_nested_mc(prior, model, 1.0, noise, 4000, 4000, substream(8, "nmc"), return_se=True)
    assert abs(est - 0.5 * math.log(19.0)) <= 4 * se + 0.02


def test_nested_mc_biased_upward_with_one_inner_sample(linear_problem):
    # a single fresh inner draw underestimates the evidence on average (Jensen)
    prior, noise, model, _ = linear_problem
    est = eig_nested_mc(prior, model, 1.0, noise, 20_000, 1, substream(9, "nmc"))
    assert est > 0.5 * math.log(19.0) + 0.5


def test_nested_mc_accepts_sample_arrays(linear_problem):
    prior, noise, model, _ = linear_problem
    U = sample_gaussian(prior, 300, substream(10, "u"))
    assert np.isfinite(eig_nested_mc(U, model, 1.0, noise, 100, 200, substream(10, "n")))
    with pytest.raises(ValueError):
        eig_nested_mc(U, model, 1.0, noise, 200, 200, substream(10, "n"))


def test_log_normalizer_matches_evidence(linear_problem):
    prior, noise, model, target = linear_problem
    t1 = target.extend([3.0], 1.0, model)
    post = conjugate_posterior(prior, [model.matrix(1.0)], [[3.0]], 1.0)
    particles = sample_gaussian(post, 1000, substream(12, "post"))
    est = estimate_log_normalizer(particles, t1, substream(12, "z"))
    exact = gaussian_log_density(Gaussian(6.0, 19.0), [3.0]) + 0.5 * math.log(2 * math.pi)
    assert est == pytest.approx(exact, abs=0.02)
    assert estimate_log_normalizer(particles, target, substream(12, "z")) == 0.0


def test_joint_sampling_reproducible(linear_problem):
    prior, noise, model, target = linear_problem
    a = _joint(prior, model, 0.5, noise, 50, 13, target)
    b = _joint(prior, model, 0.5, noise, 50, 13, target)
    np.testing.assert_array_equal(a.samples_y, b.samples_y)
