import json
import math
from dataclasses import replace

import numpy as np
import pytest

from agnostic_fedavg.availability import (
    ExplicitSampler,
    FixedSizeWeightedSampler,
    MarginalWeights,
    SubsetDistribution,
    compute_marginals_exact,
    enumerate_sampler_distribution,
)
from agnostic_fedavg.data import FederationData, SynthRegressionSpec, generate_regression
from agnostic_fedavg.engine import (
    Agnostic,
    RunConfig,
    Weighted,
    aggregate,
    averaged_iterate,
    run_fedavg,
    summary_csv,
)
from agnostic_fedavg.errors import ValidationError
from agnostic_fedavg.optimization import ClientDataset, LossModel, WeightedObjective


@pytest.fixture(scope="module")
def small_fed():
    return generate_regression(SynthRegressionSpec(n_clients=8, samples_per_client=12, dim=4,
                                                   noise_std=0.1, heterogeneity=1.0, seed=2))


@pytest.fixture(scope="module")
def skewed():
    return FixedSizeWeightedSampler.exponential(8, 3, 2.0)


def one_client_fed():
    return FederationData((ClientDataset(np.array([[1.0]]), np.array([1.0])),),
                          LossModel.squared_error())


# -- aggregation -----------------------------------------------------------------

def test_agnostic_mean():
    params = np.array([[2.0, 0.0], [9.0, 9.0], [0.0, 4.0]])
    np.testing.assert_array_equal(aggregate((0, 2), params, Agnostic(), 3), [1.0, 2.0])


def test_weighted_hand_example():
    params = np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0], [5.0, 5.0]])
    rule = Weighted(MarginalWeights(np.array([0.4, 0.1, 0.25, 0.25])))
    np.testing.assert_allclose(aggregate((0, 1), params, rule, 4), [0.8, 0.2], atol=1e-15)


def test_weighted_uniform_equals_agnostic(rng):
    params = rng.standard_normal((7, 3))
    rule = Weighted(MarginalWeights.uniform(7))
    for subset in [(0,), (1, 4), (0, 2, 3, 6)]:
        np.testing.assert_array_equal(aggregate(subset, params, rule, 7),
                                      aggregate(subset, params, Agnostic(), 7))


def test_empty_subset_rejected():
    with pytest.raises(ValidationError):
        aggregate((), np.zeros((2, 2)), Agnostic(), 2)


# -- algorithm trace ------------------------------------------------------------

def test_hand_trace_single_client():
    sampler = ExplicitSampler(SubsetDistribution(1, (((0,), 1.0),)))
    cfg = RunConfig(local_steps=2, global_rounds=1, step_size=0.25, batch_size=1, radius=10.0)
    trace = run_fedavg(cfg, sampler, Agnostic(), one_client_fed())
    assert len(trace) == 1
    np.testing.assert_array_equal(trace.records[0].aggregate, [0.5])
    np.testing.assert_array_equal(trace.final_average, [0.5])


def test_single_local_step_never_moves(small_fed, skewed):
    cfg = RunConfig(local_steps=1, global_rounds=6, step_size=0.1, batch_size=4)
    trace = run_fedavg(cfg, skewed, Agnostic(), small_fed)
    for rec in trace.records:
        np.testing.assert_array_equal(rec.aggregate, 0.0)


def test_zero_step_reports_objective_at_origin(small_fed, skewed):
    cfg = RunConfig(local_steps=3, global_rounds=4, step_size=0.0, batch_size=4)
    trace = run_fedavg(cfg, skewed, Agnostic(), small_fed)
    p = compute_marginals_exact(enumerate_sampler_distribution(skewed))
    np.testing.assert_array_equal(trace.final_average, 0.0)
    assert trace.final_objective == pytest.approx(
        WeightedObjective(p, small_fed.datasets, small_fed.model).value(np.zeros(4)))


def test_record_count_and_subsets(small_fed, skewed):
    cfg = RunConfig(local_steps=3, global_rounds=9, step_size=0.01, batch_size=4)
    trace = run_fedavg(cfg, skewed, Agnostic(), small_fed)
    assert [r.round for r in trace.records] == list(range(1, 10))
    assert all(r.subset_size == 3 for r in trace.records)
    np.testing.assert_allclose(averaged_iterate(trace), trace.final_average, atol=1e-15)


def test_determinism(small_fed, skewed):
    cfg = RunConfig(local_steps=4, global_rounds=10, step_size=0.02, batch_size=3, seed=5)
    a = run_fedavg(cfg, skewed, Agnostic(), small_fed)
    b = run_fedavg(cfg, skewed, Agnostic(), small_fed)
    for x, y in zip(a.records, b.records):
        assert x.subset == y.subset
        assert x.aggregate.tobytes() == y.aggregate.tobytes()
    c = run_fedavg(replace(cfg, seed=6), skewed, Agnostic(), small_fed)
    assert any(x.subset != y.subset for x, y in zip(a.records, c.records))


def test_uniform_weights_give_identical_traces(small_fed):
    sampler = FixedSizeWeightedSampler.exponential(8, 3, math.inf)
    cfg = RunConfig(local_steps=5, global_rounds=15, step_size=0.02, batch_size=3, seed=1)
    a = run_fedavg(cfg, sampler, Agnostic(), small_fed)
    w = run_fedavg(cfg, sampler, Weighted(MarginalWeights.uniform(8)), small_fed)
    for x, y in zip(a.records, w.records):
        assert np.max(np.abs(x.aggregate - y.aggregate)) <= 1e-12


def test_window_structure_and_synchrony(small_fed, skewed):
    H = 4
    cfg = RunConfig(local_steps=H, global_rounds=5, step_size=0.05, batch_size=3, radius=0.5)
    trace = run_fedavg(cfg, skewed, Agnostic(), small_fed, record_windows=True)
    assert len(trace.windows) == 5
    for block in trace.windows:
        # H-1 local steps plus the window's start and the broadcast state
        assert block.shape == (H + 1, 8, 4)
        assert np.all(block[-1] == block[-1][0])
        assert np.all(block[0] == block[0][0])
        assert np.all(np.linalg.norm(block, axis=-1) <= 0.5 + 1e-12)
    for rec in trace.records:
        assert np.linalg.norm(rec.aggregate) <= 0.5 + 1e-12


def test_weighted_can_leave_ball_unless_projected(small_fed, skewed):
    p = compute_marginals_exact(enumerate_sampler_distribution(skewed))
    cfg = RunConfig(local_steps=5, global_rounds=10, step_size=0.05, batch_size=3, radius=0.3)
    raw = run_fedavg(cfg, skewed, Weighted(p), small_fed)
    proj = run_fedavg(cfg, skewed, Weighted(p, project=True), small_fed)
    assert max(np.linalg.norm(r.aggregate) for r in raw.records) > 0.3
    assert max(np.linalg.norm(r.aggregate) for r in proj.records) <= 0.3 + 1e-12


def test_participation_accounting(small_fed, skewed):
    cfg = RunConfig(local_steps=2, global_rounds=20_000, step_size=0.0, batch_size=1)
    trace = run_fedavg(cfg, skewed, Agnostic(), small_fed, evaluate=False)
    contrib = np.zeros((len(trace), 8))
    for k, rec in enumerate(trace.records):
        contrib[k, list(rec.subset)] = 1.0 / rec.subset_size
    p = compute_marginals_exact(enumerate_sampler_distribution(skewed)).p
    se = contrib.std(axis=0, ddof=1) / math.sqrt(len(trace))
    assert np.all(np.abs(contrib.mean(axis=0) - p) <= 3 * se)


def test_suboptimality_and_serialization(small_fed, skewed, tmp_path):
    cfg = RunConfig(local_steps=3, global_rounds=4, step_size=0.02, batch_size=3)
    trace = run_fedavg(cfg, skewed, Agnostic(), small_fed, f_star=0.5, record_distances=True)
    rec = trace.records[-1]
    assert rec.suboptimality == pytest.approx(rec.objective_running_avg - 0.5)
    assert rec.max_client_distance >= 0
    trace.write_jsonl(tmp_path / "t.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert len(lines) == 4 and min(lines[0]["subset"]) >= 1
    assert summary_csv(trace).splitlines()[0].startswith("round,subset_size")
    json.dumps(trace.final_state_json())


@pytest.mark.parametrize("kwargs", [{"local_steps": 0}, {"global_rounds": 0}, {"step_size": -1.0},
                                    {"step_rule": "cosine"}, {"batch_size": 0}, {"radius": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        RunConfig(**kwargs)


def test_inverse_sqrt_rule():
    cfg = RunConfig(local_steps=4, global_rounds=25, step_size=0.5, step_rule="inv_sqrt")
    assert cfg.eta == pytest.approx(0.05)


def test_mismatches_rejected(small_fed):
    with pytest.raises(ValidationError):
        run_fedavg(RunConfig(batch_size=13), FixedSizeWeightedSampler.exponential(8, 2, 1.0),
                   Agnostic(), small_fed)
    with pytest.raises(ValidationError):
        run_fedavg(RunConfig(batch_size=2), FixedSizeWeightedSampler.exponential(7, 2, 1.0),
                   Agnostic(), small_fed)
