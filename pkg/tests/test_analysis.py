import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agnostic_fedavg.analysis import (
    InequalityReport,
    check_local_divergence,
    check_one_step_progress,
    check_sample_to_model,
    check_value_divergence,
    compare_rules,
    fit_rate,
    pearson,
)
from agnostic_fedavg.availability import (
    ExplicitSampler,
    FixedSizeWeightedSampler,
    MarginalWeights,
    SubsetDistribution,
)
from agnostic_fedavg.data import FederationData, SynthRegressionSpec, generate_regression
from agnostic_fedavg.engine import RunConfig
from agnostic_fedavg.errors import InsufficientDataError
from agnostic_fedavg.optimization import (
    ClientDataset,
    LossModel,
    ProjectionSet,
    estimate_constants,
    solve_reference_optimum,
)
from agnostic_fedavg.verification import random_subset_distribution

SQ = LossModel.squared_error()


def test_report_semantics():
    r = InequalityReport("x", 1.0, 0.9, 0.2)
    assert r.slack == pytest.approx(-0.1) and r.holds
    assert not InequalityReport("x", 1.0, 0.9, 0.05).holds
    doc = InequalityReport("x", np.float64(1.0), 2.0, 0.0, details={"a": np.arange(2)}).to_json()
    assert doc["holds"] is True and doc["details"]["a"] == [0, 1]


# -- sample-to-model ----------------------------------------------------------

def test_sample_to_model_singletons_equal(rng):
    d = SubsetDistribution(2, (((0,), 0.5), ((1,), 0.5)))
    r = check_sample_to_model(d, rng.standard_normal((2, 3)), rng.standard_normal(3))
    assert abs(r.slack) < 1e-12


def test_sample_to_model_hand_example():
    d = SubsetDistribution(2, (((0, 1), 1.0),))
    r = check_sample_to_model(d, np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros(2))
    assert r.lhs == 0.0 and r.rhs == 1.0 and r.slack == 1.0 and r.holds


def test_sample_to_model_degenerate(rng):
    d = random_subset_distribution(rng, 4)
    star = rng.standard_normal(2)
    r = check_sample_to_model(d, np.tile(star, (4, 1)), star)
    assert r.lhs == 0.0 and r.rhs == 0.0


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sample_to_model_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    d = random_subset_distribution(rng, n)
    r = check_sample_to_model(d, 4 * rng.standard_normal((n, 3)), rng.standard_normal(3))
    assert r.holds


# -- one-step progress --------------------------------------------------------

def test_one_step_zero_step_interior(rng):
    client = ClientDataset(rng.standard_normal((5, 2)), rng.standard_normal(5))
    C = ProjectionSet(5.0)
    theta, star = np.array([0.5, -0.2]), np.array([0.1, 0.1])
    r = check_one_step_progress(theta, client, SQ, 0.0, C, star, 1, rng, batch_size=2, G=1.0,
                                sigma_sq=1.0)
    assert r.lhs == pytest.approx(r.rhs, abs=1e-15)
    assert r.details["exact"]


def test_one_step_full_batch_quadratic(rng):
    client = ClientDataset(np.array([[1.0], [2.0], [-1.0]]), np.array([0.5, 1.0, 0.2]))
    C = ProjectionSet(3.0)
    p = MarginalWeights.uniform(1)
    star = solve_reference_optimum(p, [client], SQ, C).theta
    const = estimate_constants(SQ, [client], C, 200, rng, 3, p)
    for eta in (0.01, 0.05, 0.1):
        for theta in (np.array([-2.5]), np.array([0.0]), np.array([2.9])):
            r = check_one_step_progress(theta, client, SQ, eta, C, star, 1, rng, batch_size=3,
                                        G=const.G, sigma_sq=const.sigma_sq)
            assert r.holds and r.slack > 0


@pytest.mark.parametrize("logistic", [False, True])
def test_one_step_at_optimum(logistic, rng):
    if logistic:
        model = LossModel.logistic(3)
        client = ClientDataset(rng.standard_normal((6, 2)), rng.integers(0, 3, 6))
    else:
        model = SQ
        X = rng.standard_normal((6, 2))
        client = ClientDataset(X, X @ np.array([1.0, -1.0]) + 0.3 * rng.standard_normal(6))
    C = ProjectionSet(1.0)
    p = MarginalWeights.uniform(1)
    star = solve_reference_optimum(p, [client], model, C).theta
    const = estimate_constants(model, [client], C, 200, rng, 2, p, extra_points=[star])
    eta = 0.05
    r = check_one_step_progress(star, client, model, eta, C, star, 1, rng, batch_size=2,
                                G=const.G, sigma_sq=const.sigma_sq)
    assert r.details["exact"] and r.samples == math.comb(6, 2)
    assert r.rhs >= 2 * eta**2 * (const.sigma_sq + const.G**2) - 1e-15
    assert r.holds


def test_one_step_monte_carlo_path(rng):
    client = ClientDataset(rng.standard_normal((40, 2)), rng.standard_normal(40))
    r = check_one_step_progress(np.zeros(2), client, SQ, 0.01, ProjectionSet(2.0), np.zeros(2),
                                300, rng, batch_size=10, G=10.0, sigma_sq=1.0)
    assert not r.details["exact"] and r.samples == 300 and r.tolerance > 1e-10


# -- divergence checks --------------------------------------------------------

@pytest.fixture(scope="module")
def five_clients():
    data = generate_regression(SynthRegressionSpec(n_clients=5, samples_per_client=10, dim=3,
                                                   heterogeneity=1.0, seed=4))
    return data, FixedSizeWeightedSampler.exponential(5, 2, 3.0)


def test_divergence_single_client():
    data = generate_regression(SynthRegressionSpec(n_clients=1, samples_per_client=6, dim=2))
    sampler = ExplicitSampler(SubsetDistribution(1, (((0,), 1.0),)))
    cfg = RunConfig(local_steps=3, global_rounds=3, step_size=0.01, batch_size=2)
    r = check_local_divergence(cfg, sampler, data, 2, theta_samples=10)
    assert r.lhs == 0.0 and r.holds


def test_divergence_frozen(five_clients):
    data, sampler = five_clients
    cfg = RunConfig(local_steps=4, global_rounds=3, step_size=0.0, batch_size=2)
    assert check_local_divergence(cfg, sampler, data, 2, theta_samples=10).lhs == 0.0
    assert check_value_divergence(cfg, sampler, data, 2, theta_samples=10).lhs == 0.0


def test_value_divergence_constant_loss(five_clients):
    _, sampler = five_clients
    data = FederationData(tuple(ClientDataset(np.zeros((4, 2)), np.ones(4)) for _ in range(5)), SQ)
    cfg = RunConfig(local_steps=4, global_rounds=3, step_size=0.1, batch_size=2)
    assert check_value_divergence(cfg, sampler, data, 2, theta_samples=10).lhs == 0.0


def test_divergence_bounds_hold(five_clients):
    data, sampler = five_clients
    cfg = RunConfig(local_steps=4, global_rounds=10, step_size=0.01, batch_size=2, radius=2.0)
    a = check_local_divergence(cfg, sampler, data, 4, theta_samples=50)
    b = check_value_divergence(cfg, sampler, data, 4, theta_samples=50)
    assert a.holds and a.slack > 0 and b.holds and b.slack > 0
    assert a.details["windows"] == 10


# -- rate fit ----------------------------------------------------------------------

def test_fit_planted_power_law():
    for c, a in [(3.0, -0.5), (0.2, -1.0), (7.0, -0.37)]:
        fit = fit_rate({T: c * T**a for T in (100, 400, 1600, 6400)})
        assert abs(fit.slope - a) < 1e-9 and fit.r2 == pytest.approx(1.0, abs=1e-12)
        assert fit.intercept == pytest.approx(math.log(c), abs=1e-9)


def test_fit_constant():
    fit = fit_rate({10: 2.0, 100: 2.0, 1000: 2.0})
    assert abs(fit.slope) < 1e-12


def test_fit_excludes_nonpositive():
    with pytest.warns(UserWarning):
        fit = fit_rate({10: 1.0, 100: 0.1, 1000: 0.0})
    assert fit.excluded == (1000,) and fit.horizons == (10, 100)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(InsufficientDataError):
            fit_rate({10: 1.0, 100: -1.0})


# -- rule comparison ------------------------------------------------------------

def test_uniform_rules_identical():
    data = generate_regression(SynthRegressionSpec(n_clients=6, samples_per_client=8, dim=3))
    sampler = FixedSizeWeightedSampler.exponential(6, 2, math.inf)
    cfg = RunConfig(local_steps=3, global_rounds=8, batch_size=2)
    for res in compare_rules(cfg, sampler, data, [0, 1, 2]):
        assert res.difference == 0.0 and res.skew == 0.0


def test_single_client_rules_identical():
    data = generate_regression(SynthRegressionSpec(n_clients=1, samples_per_client=8, dim=3))
    sampler = ExplicitSampler(SubsetDistribution(1, (((0,), 1.0),)))
    cfg = RunConfig(local_steps=3, global_rounds=5, batch_size=2)
    (res,) = compare_rules(cfg, sampler, data, [3])
    assert res.difference == 0.0


def test_pearson():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([0, 0, 0], [1, 2, 3]) is None
    assert pearson([1], [1]) is None
