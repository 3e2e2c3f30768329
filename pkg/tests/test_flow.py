import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultflow.density import CouplingFlow, Standardizer, identity_model
from faultflow.density.flow import AffineWhitening, half_masks

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def random_flow(d, seed, scale=0.3, layers=4, hidden=16):
    flow = CouplingFlow(d, hidden=hidden, n_layers=layers)
    flow.init_random(np.random.default_rng(seed), output_scale=scale)
    return flow


def test_identity_flow_is_standard_normal():
    model = identity_model(1)
    assert model.log_prob([0.0]) == pytest.approx(-HALF_LOG_2PI, abs=1e-12)
    assert model.log_prob([1.0]) == pytest.approx(-HALF_LOG_2PI - 0.5, abs=1e-12)
    assert model.log_prob([0.0]) == pytest.approx(-0.9189, abs=1e-4)
    assert model.log_prob([1.0]) == pytest.approx(-1.4189, abs=1e-4)


def test_identity_flow_in_higher_dimension():
    model = identity_model(5)
    assert model.log_prob(np.zeros(5)) == pytest.approx(-5 * HALF_LOG_2PI, abs=1e-12)


@pytest.mark.parametrize("s", [0.5, 2.0, 170.0])
def test_scaling_log_det(s):
    std = Standardizer(np.zeros(1), np.array([s]), np.zeros(1, bool), np.zeros(1, bool))
    model = identity_model(1, standardizer=std)
    assert model.log_det_jacobian([3.0]) == pytest.approx(-math.log(s), abs=1e-12)


def test_non_finite_input_rejected():
    from faultflow.errors import DomainError

    model = identity_model(2)
    with pytest.raises(DomainError):
        model.log_prob([float("nan"), 0.0])
    with pytest.raises(DomainError):
        model.log_det_jacobian([float("inf"), 0.0])


def test_masks_alternate_and_cover_every_dim():
    for d in (1, 2, 3, 7):
        masks = half_masks(d, 4)
        transformed = sum(1.0 - m for m in masks)
        assert np.all(transformed >= 1)
        np.testing.assert_array_equal(masks[0] + masks[1], np.ones(d))


@settings(max_examples=25, deadline=None)
@given(d=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_inverse_recovers_input(d, seed):
    flow = random_flow(d, seed)
    u = np.random.default_rng(seed + 1).standard_normal((64, d)) * 2
    z, _ = flow.forward(u)
    assert np.max(np.abs(flow.inverse(z) - u)) < 1e-6


def numeric_logdet(flow, u, eps=1e-6):
    d = u.size
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps
        hi, _ = flow.forward((u + e)[None, :])
        lo, _ = flow.forward((u - e)[None, :])
        jac[:, j] = (hi[0] - lo[0]) / (2 * eps)
    return np.linalg.slogdet(jac)[1]


@settings(max_examples=20, deadline=None)
@given(d=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_log_det_matches_finite_differences(d, seed):
    flow = random_flow(d, seed)
    u = np.random.default_rng(seed + 2).standard_normal(d)
    _, logdet = flow.forward(u[None, :])
    assert abs(logdet[0] - numeric_logdet(flow, u)) < 1e-4


@pytest.mark.parametrize("d", [1, 2, 4])
def test_gradient_matches_finite_differences(d):
    flow = random_flow(d, 11 + d, scale=0.2, hidden=8)
    u = np.random.default_rng(3).standard_normal((20, d))
    _, grad = flow.nll_and_grad(u)
    theta0 = flow.theta.copy()
    numeric = np.empty_like(theta0)
    eps = 1e-6
    for i in range(theta0.size):
        flow.theta[:] = theta0
        flow.theta[i] += eps
        hi, _ = flow.nll_and_grad(u)
        flow.theta[i] -= 2 * eps
        lo, _ = flow.nll_and_grad(u)
        numeric[i] = (hi - lo) / (2 * eps)
    flow.theta[:] = theta0
    for key, offset, shape in flow.parameter_names():
        size = int(np.prod(shape))
        a, b = grad[offset:offset + size], numeric[offset:offset + size]
        scale = max(np.linalg.norm(b), 1e-3)
        assert np.linalg.norm(a - b) / scale < 1e-4, key


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_flow_density_integrates_to_one(seed):
    flow = random_flow(2, seed, scale=0.2)
    grid = np.linspace(-9, 9, 361)
    xx, yy = np.meshgrid(grid, grid)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    step = grid[1] - grid[0]
    mass = float(np.sum(np.exp(flow.log_prob(pts))) * step * step)
    assert 0.98 <= mass <= 1.02


def test_clamp_bounds_scale():
    flow = random_flow(3, 5, scale=50.0)
    u = np.random.default_rng(0).standard_normal((100, 3))
    _, logdet = flow.forward(u)
    # Each layer transforms at most ceil(d/2) dims, each with |s| <= clamp.
    assert np.all(np.abs(logdet) <= flow.n_layers * 2 * flow.clamp + 1e-9)


def test_flow_json_round_trip():
    flow = random_flow(3, 9)
    back = CouplingFlow.from_json(flow.to_json(), 3)
    u = np.random.default_rng(1).standard_normal((10, 3))
    np.testing.assert_array_equal(back.log_prob(u), flow.log_prob(u))


def test_affine_whitening_matches_gaussian_density():
    from scipy.stats import multivariate_normal

    rng = np.random.default_rng(4)
    cov = np.array([[2.0, 0.8], [0.8, 1.0]])
    u = rng.multivariate_normal([1.0, -1.0], cov, size=20000)
    aw = AffineWhitening.fit(u)
    pts = rng.standard_normal((50, 2))
    ref = multivariate_normal(u.mean(axis=0), np.cov(u, rowvar=False, bias=True)).logpdf(pts)
    np.testing.assert_allclose(aw.log_prob(pts), ref, atol=1e-9)
    np.testing.assert_allclose(aw.inverse(aw.forward(pts)[0]), pts, atol=1e-12)
    diag = AffineWhitening.fit(u, diagonal=True)
    assert diag.chol[0, 1] == 0 and diag.chol[1, 0] == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_one_dimensional_density_integrates_to_one(seed):
    flow = random_flow(1, seed, scale=0.5)
    lo, hi = flow.inverse(np.array([[-10.0], [10.0]]))[:, 0]
    grid = np.linspace(lo, hi, 40001)
    mass = float(np.sum(np.exp(flow.log_prob(grid[:, None]))) * (grid[1] - grid[0]))
    assert 0.98 <= mass <= 1.02
