import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqboed.errors import ForwardModelError
from seqboed.forward_models import (
    HeatModel,
    HeatModelConfig,
    LinearModel,
    MatrixLinearModel,
    NearLinearModel,
    NearLinearModelConfig,
    design_operator,
    heat_noise_scale,
    observation_points,
)
from seqboed.verify import check_fem, manufactured_error


def test_design_operator_peaks_at_one():
    assert design_operator(2.0, 3.0, 1.0) == 3.0
    assert design_operator(2.0, 3.0, 0.0) == design_operator(2.0, 3.0, 2.0) == 1.0


def test_linear_and_near_linear_models():
    u = np.array([[1.0], [2.0]])
    np.testing.assert_allclose(LinearModel().evaluate_batch(u, 1.0), 3.0 * u)
    nl = NearLinearModel(NearLinearModelConfig(tau=0.5))
    np.testing.assert_allclose(nl.evaluate_batch(u, 1.0), 3.0 * u + 0.5 * u**2)
    # tau = 0 reduces to the linear model
    nl0 = NearLinearModel(NearLinearModelConfig(tau=0.0))
    np.testing.assert_allclose(nl0.evaluate_batch(u, 0.3), LinearModel().evaluate_batch(u, 0.3))


def test_batch_shape_checks():
    with pytest.raises(ValueError):
        LinearModel().evaluate_batch(np.ones((3, 2)), 1.0)


def test_finite_difference_jacobian():
    rng = np.random.default_rng(0)
    U = rng.standard_normal((4, 1))
    nl = NearLinearModel(NearLinearModelConfig(tau=1.0))
    jac = nl.jacobian_batch(U, 0.5)
    exact = design_operator(2.0, 3.0, 0.5) + 2.0 * U
    np.testing.assert_allclose(jac[:, 0, 0], exact[:, 0], rtol=1e-8)
    a = rng.standard_normal((3, 2))
    np.testing.assert_allclose(MatrixLinearModel(a).jacobian_batch(rng.standard_normal((5, 2)), 0.0)[2], a, atol=1e-8)


def test_heat_config_validation():
    with pytest.raises(ValueError):
        HeatModelConfig(obs_steps=(0, 5))
    with pytest.raises(ValueError):
        HeatModelConfig(n_x=3)
    cfg = HeatModelConfig()
    assert cfg.obs_dim == 3 and cfg.n_interior == 31
    np.testing.assert_allclose(observation_points(2), [0.25, 0.5, 0.75])


def test_heat_output_shapes_and_design_scaling():
    heat = HeatModel()
    u = 2.0 * np.ones(8)
    traj = heat.solve(u, 1.0)
    assert traj.shape == (15, 31)
    # design enters only through the source amplitude exp(-alpha (p - 1)^2)
    np.testing.assert_allclose(heat.solve(u, 0.5), np.exp(-10.0 * 0.25) * traj, rtol=1e-13)
    obs = heat.observed_at(5).evaluate_batch(np.vstack([u, u]), 1.0)
    assert obs.shape == (2, 3)
    assert np.all(obs > 0)
    assert heat.stacked().obs_dim == 9


def test_heat_solution_symmetric_for_constant_diffusivity():
    # u = 0 gives a constant diffusivity; the source is symmetric about x = 1/2
    heat = HeatModel()
    obs = heat.observed_at(15).evaluate(np.zeros(8), 1.0)
    assert obs[0] != obs[2]  # cos-expansion breaks symmetry only through u
    heat_flat = HeatModel(HeatModelConfig(diffusion_c=0.0))
    obs = heat_flat.observed_at(15).evaluate(np.ones(8), 1.0)
    assert obs[0] == pytest.approx(obs[2], rel=1e-10)


def test_heat_noise_scale_value():
    assert heat_noise_scale(HeatModelConfig()) == pytest.approx(1.2716e-2, rel=1e-3)


def test_heat_rejects_nonfinite_parameters():
    with pytest.raises(ForwardModelError):
        HeatModel().observed_at(5).evaluate_batch(np.full((1, 8), np.nan), 1.0)


def test_fem_spatial_order_and_reference_agreement():
    res = check_fem()
    assert res.passed, res.detail


def test_fem_temporal_order_against_fine_dt():
    # same mesh, successive dt halvings: midpoint rule is second order in time
    cfg = HeatModelConfig()
    u = 2.0 * np.ones(8)
    ref = HeatModel(HeatModelConfig(dt=cfg.dt / 64, n_steps=cfg.n_steps * 64)).solve(u, 1.0)[-1]
    errs = []
    for k in (1, 2, 4):
        sol = HeatModel(HeatModelConfig(dt=cfg.dt / k, n_steps=cfg.n_steps * k)).solve(u, 1.0)[-1]
        errs.append(np.linalg.norm(sol - ref))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.7), rates


def test_manufactured_error_decreases():
    assert manufactured_error(17) < manufactured_error(9)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(0.5, 2.0))
def test_heat_linear_in_amplitude(p, scale):
    cfg = HeatModelConfig(source_scale=scale)
    u = np.linspace(-1, 1, 8)
    a = HeatModel(cfg).solve(u, p)
    b = HeatModel().solve(u, p)
    np.testing.assert_allclose(a, scale * b, rtol=1e-12, atol=1e-300)
