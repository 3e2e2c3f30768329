import io
import math

import numpy as np
import pytest
from statsmodels.nonparametric.bandwidths import bw_silverman

from conftest import make_dataset
from faultflow.density import (
    DensityModel,
    FitConfig,
    ModelBundle,
    ModelKind,
    fit,
    fit_bundle,
    identity_model,
    load_store,
    save_store,
)
from faultflow.density.bundle import bundle_filename, derive_seed, invocation_groups
from faultflow.density.fit import split_indices, validation_split
from faultflow.density.preprocess import Standardizer
from faultflow.density.univariate import UnivariateModel, fit_univariate, fit_values, silverman_bandwidth
from faultflow.demo import SERVLET, WorkloadConfig, generate_requests, nutrition_graph, run_requests
from faultflow.errors import DataError, DomainError, InsufficientDataError
from faultflow.graph import CodeElementRef, Role, ValueKind, assemble_datasets, read_trace

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
FAST = FitConfig(epochs=60, seed=1)


@pytest.fixture(scope="module")
def fitted_2d():
    rng = np.random.default_rng(7)
    ds = make_dataset(rng.standard_normal((4000, 2)))
    return fit(ds, FitConfig(seed=3))


def test_fitted_standard_normal_recovers_entropy(fitted_2d):
    fresh = np.random.default_rng(99).standard_normal((5000, 2))
    ll = fitted_2d.mean_log_likelihood(fresh).value
    assert abs(ll - (-1 - 2 * HALF_LOG_2PI)) < 0.1
    assert abs(fitted_2d.log_prob([0.0, 0.0]) - (-2 * HALF_LOG_2PI)) < 0.2


def test_training_improves_validation_likelihood(fitted_2d):
    history = fitted_2d.history
    assert max(history) > history[0]
    assert fitted_2d.self_ll == pytest.approx(max(history), abs=1e-9)


def test_self_ll_is_held_out_mean(fitted_2d):
    rng = np.random.default_rng(7)
    ds = make_dataset(rng.standard_normal((4000, 2)))
    val = validation_split(ds, fitted_2d.config)
    assert val.n == 800
    assert fitted_2d.mean_log_likelihood(val.rows).value == pytest.approx(fitted_2d.self_ll, abs=1e-12)


def test_fit_is_deterministic():
    rng = np.random.default_rng(1)
    ds = make_dataset(rng.normal(size=(300, 3)))
    a, b = fit(ds, FAST), fit(ds, FAST)
    assert a.transform.theta.tobytes() == b.transform.theta.tobytes()
    assert a.self_ll == b.self_ll


def test_too_few_rows_raises_insufficient_data():
    ds = make_dataset(np.random.default_rng(0).normal(size=(5, 10)))
    with pytest.raises(InsufficientDataError) as info:
        fit(ds)
    assert info.value.n == 5 and info.value.required == 20


def test_non_finite_training_data_rejected():
    rows = np.random.default_rng(0).normal(size=(50, 2))
    rows[3, 1] = np.nan
    with pytest.raises(DomainError):
        fit(make_dataset(rows))


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        FitConfig(validation_fraction=1.5)
    with pytest.raises(ValueError):
        FitConfig(coupling_layers=0)


def test_split_is_disjoint_and_complete():
    train, val = split_indices(101, 0.2, 5)
    assert len(val) == 20
    assert sorted(np.concatenate([train, val]).tolist()) == list(range(101))


def test_samples_match_moments_and_stay_finite(fitted_2d):
    xs = fitted_2d.sample(20000, seed=4)
    assert np.all(np.abs(xs.mean(axis=0)) < 0.05)
    assert np.all(np.abs(xs.std(axis=0) - 1) < 0.05)
    assert np.all(np.isfinite(fitted_2d.log_prob_batch(xs[:500])))


def test_identity_sampling_law_of_large_numbers():
    xs = identity_model(1).sample(100_000, seed=0)
    assert abs(xs.mean()) < 0.02
    assert abs(xs.var() - 1) < 0.02


def test_sample_count_must_be_positive(fitted_2d):
    with pytest.raises(ValueError):
        fitted_2d.sample(0, seed=0)


def test_fitted_density_integrates_to_one(fitted_2d):
    grid = np.linspace(-7, 7, 281)
    xx, yy = np.meshgrid(grid, grid)
    lp = fitted_2d.log_prob_batch(np.column_stack([xx.ravel(), yy.ravel()]))
    mass = float(np.exp(lp).sum() * (grid[1] - grid[0]) ** 2)
    assert 0.98 <= mass <= 1.02


def test_model_json_round_trip(fitted_2d):
    back = DensityModel.from_json(fitted_2d.to_json())
    pts = np.random.default_rng(2).normal(size=(30, 2))
    np.testing.assert_array_equal(back.log_prob_batch(pts), fitted_2d.log_prob_batch(pts))
    assert back.self_ll == fitted_2d.self_ll
    assert back.columns == fitted_2d.columns


def test_gaussian_baseline_matches_analytic_entropy():
    rng = np.random.default_rng(3)
    rho = 0.6
    rows = rng.multivariate_normal([170, 70], [[49, rho * 7 * 15], [rho * 7 * 15, 225]], size=5000)
    model = fit(make_dataset(rows), FitConfig(seed=0), kind=ModelKind.GAUSSIAN_BASELINE)
    expected = -(1 + 2 * HALF_LOG_2PI) - 0.5 * math.log(49 * 225 * (1 - rho**2))
    assert abs(model.self_ll - expected) < 0.1
    back = DensityModel.from_json(model.to_json())
    assert back.log_prob(rows[0]) == pytest.approx(model.log_prob(rows[0]), abs=1e-12)


def test_discrete_column_dequantized_and_evaluated_at_cell_center():
    rng = np.random.default_rng(0)
    rows = np.column_stack([rng.normal(size=600), rng.integers(0, 2, size=600)])
    ds = make_dataset(rows, discrete={1: 2})
    model = fit(ds, FAST)
    assert model.standardizer.discrete.tolist() == [False, True]
    a = model.log_prob([0.1, 1.0])
    assert np.isfinite(a)
    standardized = model.standardizer.transform(np.array([[0.1, 1.0]]))
    expected = (1.5 - model.standardizer.mean[1]) / model.standardizer.scale[1]
    assert standardized[0, 1] == pytest.approx(expected)


def test_constant_column_handled_with_jitter():
    rng = np.random.default_rng(0)
    rows = np.column_stack([rng.normal(size=400), np.full(400, 3.0)])
    model = fit(make_dataset(rows), FAST)
    assert model.standardizer.degenerate.tolist() == [False, True]
    assert np.isfinite(model.self_ll)


def test_standardizer_inverse_undoes_transform():
    rng = np.random.default_rng(1)
    rows = np.column_stack([rng.normal(5, 3, size=50), rng.integers(0, 4, size=50)])
    std = Standardizer.fit(rows, np.array([False, True]))
    back = std.inverse(std.transform(rows))
    np.testing.assert_allclose(back, rows, atol=1e-9)


def test_mean_log_likelihood_excludes_few_non_finite_rows(fitted_2d):
    rows = np.random.default_rng(0).normal(size=(1000, 2))
    rows[0, 0] = np.inf
    res = fitted_2d.mean_log_likelihood(rows)
    assert res.n_used == 999 and res.n_excluded == 1
    rows[:20, 0] = np.nan
    with pytest.raises(DataError, match="incompatible"):
        fitted_2d.mean_log_likelihood(rows)


# -- univariate estimators ----------------------------------------------------

CONT = CodeElementRef("X.run", "x", Role.PARAMETER)


def test_kde_of_standard_normal_near_zero():
    values = np.random.default_rng(0).standard_normal(5000)
    model = fit_values(CONT, values)
    assert model.log_pdf(0.0)[0] == pytest.approx(-HALF_LOG_2PI, abs=0.1)


def test_silverman_bandwidth_matches_reference():
    values = np.random.default_rng(5).gamma(3.0, size=2000)
    assert silverman_bandwidth(values) == pytest.approx(float(bw_silverman(values)), rel=1e-9)


def test_two_point_kde_is_finite_everywhere_between():
    model = fit_values(CONT, np.array([1.0, 2.0]))
    lp = model.log_pdf(np.linspace(0.5, 2.5, 21))
    assert np.all(np.isfinite(lp))
    assert model.bandwidth > 0


def test_constant_kde_is_flagged_degenerate():
    model = fit_values(CONT, np.full(30, 4.0))
    assert model.degenerate
    assert np.isfinite(model.log_pdf(4.0)[0])


def test_laplace_table_never_zero():
    el = CodeElementRef("X.run", "g", Role.PARAMETER, ValueKind.DISCRETE, cardinality=2)
    n = 40
    model = fit_values(el, np.zeros(n))
    assert model.probabilities[0] == pytest.approx((n + 1) / (n + 2))
    assert model.probabilities[1] == pytest.approx(1 / (n + 2))
    assert model.probabilities.sum() == pytest.approx(1.0)


def test_univariate_self_ll_is_held_out_and_round_trips():
    ds = make_dataset(np.random.default_rng(2).normal(size=(500, 1)))
    model = fit_univariate(ds, "x0", seed=3)
    _, val = split_indices(500, 0.2, 3)
    assert model.mean_log_likelihood(ds.rows[val, 0]).value == pytest.approx(model.self_ll)
    back = UnivariateModel.from_json(model.to_json())
    np.testing.assert_array_equal(back.log_pdf([0.0, 1.0]), model.log_pdf([0.0, 1.0]))


# -- bundles and stores ---------------------------------------------------------


def test_derived_seeds_differ_by_label():
    assert derive_seed(0, "a") != derive_seed(0, "b")
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert derive_seed(0, "a") != derive_seed(1, "a")


def test_bundle_store_round_trip(tmp_path):
    buf = io.StringIO()
    run_requests(generate_requests(WorkloadConfig(request_count=200, seed=1)), "none", buf)
    events, graph = read_trace(io.StringIO(buf.getvalue()))
    ds = assemble_datasets(events, graph)[SERVLET]
    bundle = fit_bundle(ds, FAST)
    assert set(invocation_groups(ds)) == set(bundle.groups)
    assert set(bundle.univariate) == set(ds.element_ids)
    save_store(tmp_path, {SERVLET: bundle}, nutrition_graph().digest(), FAST)
    assert (tmp_path / bundle_filename(SERVLET)).exists()
    loaded, manifest = load_store(tmp_path)
    assert manifest["graph_hash"] == nutrition_graph().digest()
    again = loaded[SERVLET]
    assert isinstance(again, ModelBundle)
    assert again.full.log_prob(ds.rows[0]) == bundle.full.log_prob(ds.rows[0])


def test_bundle_filename_is_filesystem_safe():
    assert "/" not in bundle_filename("pkg/Outer$Inner.run")
