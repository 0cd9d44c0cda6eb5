"""The default verification suite: randomized instances plus fixed simulations."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import (
    InequalityReport,
    RateFit,
    check_local_divergence,
    check_one_step_progress,
    check_sample_to_model,
    check_value_divergence,
    rate_sweep,
)
from .availability import (
    FixedSizeWeightedSampler,
    MarginalWeights,
    SubsetDistribution,
    compute_marginals_exact,
    enumerate_sampler_distribution,
    estimate_marginals,
)
from .data import SynthRegressionSpec, generate_regression
from .engine import RunConfig
from .optimization import (
    ClientDataset,
    LossModel,
    ProjectionSet,
    estimate_constants,
    sample_ball,
    solve_reference_optimum,
)

QUICK = "quick"
FULL = "full"

SCALES = {
    QUICK: {"normalization": 200, "sample_to_model": 200, "one_step": 50, "divergence_seeds": 5,
            "oracle_draws": 20_000, "rate": False},
    FULL: {"normalization": 1000, "sample_to_model": 1000, "one_step": 200,
           "divergence_seeds": 20, "oracle_draws": 100_000, "rate": True},
}

RATE_HORIZONS = (64, 256, 1024, 4096)
RATE_BAND = (-0.7, -0.3)
RATE_MIN_R2 = 0.9


def random_subset_distribution(rng: np.random.Generator, n_clients: int,
                               max_atoms: int = 12, singletons: bool = False) -> SubsetDistribution:
    """Random distribution over distinct nonempty subsets with Dirichlet weights."""
    if singletons:
        k = int(rng.integers(1, n_clients + 1))
        picks = rng.choice(n_clients, size=k, replace=False)
        subsets = [(int(i),) for i in picks]
    else:
        universe = 2**n_clients - 1
        k = int(rng.integers(1, min(universe, max_atoms) + 1))
        masks = rng.choice(np.arange(1, universe + 1), size=k, replace=False)
        subsets = [tuple(i for i in range(n_clients) if (int(m) >> i) & 1) for m in masks]
    probs = rng.dirichlet(np.ones(len(subsets)))
    probs /= math.fsum(probs)
    return SubsetDistribution(n_clients, tuple(zip(subsets, probs.tolist())))


def worst_case(name: str, reports: list[InequalityReport], tolerance: float) -> InequalityReport:
    """Collapse many instance reports into the one with the least slack."""
    worst = min(reports, key=lambda r: r.slack)
    failures = sum(not r.holds for r in reports)
    return InequalityReport(name, worst.lhs, worst.rhs, tolerance, len(reports),
                            {"failures": failures, **worst.details})


def normalization_report(rng: np.random.Generator, instances: int, max_n: int = 10) -> InequalityReport:
    errs = []
    for _ in range(instances):
        n = int(rng.integers(1, max_n + 1))
        dist = random_subset_distribution(rng, n)
        errs.append(abs(compute_marginals_exact(dist).p.sum() - 1.0))
    return InequalityReport("marginal_normalization", max(errs), 0.0, 1e-12, instances)


def oracle_agreement_report(rng: np.random.Generator, draws: int) -> InequalityReport:
    """Largest |estimate - exact| / stderr for the six-client exp(-i/10) sampler."""
    sampler = FixedSizeWeightedSampler.exponential(6, 2, 10.0)
    exact = compute_marginals_exact(enumerate_sampler_distribution(sampler)).p
    est = estimate_marginals(sampler, draws, rng)
    z = np.abs(est.p - exact) / est.stderr
    return InequalityReport("marginal_oracle_agreement", float(z.max()), 3.0, 0.0, draws,
                            {"exact": exact.tolist(), "estimate": est.p.tolist()})


def sample_to_model_report(rng: np.random.Generator, instances: int,
                           max_n: int = 8) -> tuple[InequalityReport, InequalityReport]:
    general, single = [], []
    for k in range(instances):
        n = int(rng.integers(1, max_n + 1))
        dim = int(rng.integers(1, 5))
        params = sample_ball(rng, dim, 5.0, n)
        star = sample_ball(rng, dim, 5.0, 1)[0]
        general.append(check_sample_to_model(random_subset_distribution(rng, n), params, star))
        single.append(check_sample_to_model(
            random_subset_distribution(rng, n, singletons=True), params, star))
    gap = max(abs(r.slack) for r in single)
    return (worst_case("sample_to_model", general, 1e-10),
            InequalityReport("sample_to_model_singleton_equality", gap, 0.0, 1e-12, instances))


def tiny_federation(rng: np.random.Generator, kind: str) -> tuple[list[ClientDataset], LossModel]:
    """Three clients with at most eight samples each."""
    datasets = []
    if kind == "squared_error":
        model = LossModel.squared_error()
        truth = rng.standard_normal(3)
        for _ in range(3):
            n = int(rng.integers(3, 9))
            X = rng.standard_normal((n, 3))
            datasets.append(ClientDataset(X, X @ truth + 0.3 * rng.standard_normal(n)))
    else:
        model = LossModel.logistic(3)
        for _ in range(3):
            n = int(rng.integers(3, 9))
            datasets.append(ClientDataset(rng.standard_normal((n, 2)), rng.integers(0, 3, n)))
    return datasets, model


def one_step_report(rng: np.random.Generator, instances: int, g_scale: float = 1.0,
                    radius: float = 3.0) -> InequalityReport:
    C = ProjectionSet(radius)
    reports = []
    per_fed = 10
    for start in range(0, instances, per_fed):
        kind = "squared_error" if (start // per_fed) % 2 == 0 else "multinomial_logistic"
        datasets, model = tiny_federation(rng, kind)
        b = int(rng.integers(1, 4))
        p = MarginalWeights.uniform(len(datasets))
        star = solve_reference_optimum(p, datasets, model, C).theta
        const = estimate_constants(model, datasets, C, 200, rng, b, p)
        for _ in range(min(per_fed, instances - start)):
            i = int(rng.integers(len(datasets)))
            theta = sample_ball(rng, star.size, radius, 1)[0]
            eta = float(rng.uniform(1e-4, 0.05))
            reports.append(check_one_step_progress(
                theta, datasets[i], model, eta, C, star, 1, rng, batch_size=min(b, datasets[i].n_samples),
                G=const.G * g_scale, sigma_sq=const.sigma_sq))
    return worst_case("one_step_progress", reports, 1e-10)


def divergence_setup(seed: int = 0):
    """N=5 regression federation, H=4, eta=0.01 used for the window checks.

    Strongly heterogeneous clients on a unit ball keep the sampled G within a
    small factor of the gradients seen along the trajectory, so the bounds are
    not vacuous.
    """
    data = generate_regression(SynthRegressionSpec(n_clients=5, samples_per_client=20, dim=5,
                                                   noise_std=0.1, heterogeneity=2.0, seed=seed))
    sampler = FixedSizeWeightedSampler.exponential(5, 2, 10.0)
    config = RunConfig(local_steps=4, global_rounds=25, step_size=0.01, batch_size=5,
                       radius=1.0, seed=seed)
    return config, sampler, data


def divergence_reports(seeds: int, g_scale: float = 1.0,
                       theta_samples: int = 200) -> tuple[InequalityReport, InequalityReport]:
    config, sampler, data = divergence_setup()
    p = compute_marginals_exact(enumerate_sampler_distribution(sampler))
    const = estimate_constants(data.model, data.datasets, config.projection, theta_samples,
                               np.random.default_rng([config.seed, 0xC0457]), config.batch_size, p)
    const = const._replace(G=const.G * g_scale)
    return (check_local_divergence(config, sampler, data, seeds, const),
            check_value_divergence(config, sampler, data, seeds, const))


def rate_setup():
    """Noiseless N=10, d=5 regression on a ball small enough to bind at the optimum."""
    data = generate_regression(SynthRegressionSpec(n_clients=10, samples_per_client=50, dim=5,
                                                   noise_std=0.0, heterogeneity=0.5, seed=0))
    sampler = FixedSizeWeightedSampler.exponential(10, 3, 5.0)
    config = RunConfig(local_steps=5, batch_size=50, radius=0.4, seed=0)
    return config, sampler, data


def rate_reports(scale: float = 0.1) -> tuple[RateFit, list[InequalityReport]]:
    config, sampler, data = rate_setup()
    fit, _ = rate_sweep(config, sampler, data, RATE_HORIZONS, scale)
    lo, hi = RATE_BAND
    return fit, [
        InequalityReport("rate_slope_upper", fit.slope, hi, 0.0, len(fit.horizons)),
        InequalityReport("rate_slope_lower", lo, fit.slope, 0.0, len(fit.horizons)),
        InequalityReport("rate_r2", RATE_MIN_R2, fit.r2, 0.0, len(fit.horizons)),
    ]


@dataclass
class VerificationResult:
    scale: str
    reports: list[InequalityReport] = field(default_factory=list)
    rate: RateFit | None = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(r.holds for r in self.reports)

    def constants(self) -> dict | None:
        """G, sigma^2 and the Lipschitz bound behind the window checks."""
        for r in self.reports:
            if r.name == "local_divergence":
                return {k: r.details[k] for k in ("G", "sigma_sq", "lipschitz")}
        return None

    def failing(self) -> list[InequalityReport]:
        return [r for r in self.reports if not r.holds]

    def to_json(self) -> dict:
        return {
            "scale": self.scale,
            "ok": self.ok,
            "seconds": self.seconds,
            "reports": [r.to_json() for r in self.reports],
            "constants": self.constants(),
            "rate_fit": None if self.rate is None else self.rate.to_json(),
        }


def run_verification(scale: str = QUICK, seed: int = 0, g_scale: float = 1.0) -> VerificationResult:
    """Run every checker at the given scale. ``g_scale`` < 1 is a negative control."""
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}")
    knobs = SCALES[scale]
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    res = VerificationResult(scale)
    res.reports.append(normalization_report(rng, knobs["normalization"]))
    res.reports.append(oracle_agreement_report(rng, knobs["oracle_draws"]))
    res.reports.extend(sample_to_model_report(rng, knobs["sample_to_model"]))
    res.reports.append(one_step_report(rng, knobs["one_step"], g_scale))
    res.reports.extend(divergence_reports(knobs["divergence_seeds"], g_scale))
    if knobs["rate"]:
        res.rate, rate_reps = rate_reports()
        res.reports.extend(rate_reps)
    res.seconds = time.perf_counter() - start
    return res


def format_table(reports: list[InequalityReport]) -> str:
    head = f"{'name':<36} {'lhs':>14} {'rhs':>14} {'slack':>14}  holds"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.name:<36} {r.lhs:>14.6g} {r.rhs:>14.6g} {r.slack:>14.6g}  "
                     f"{'yes' if r.holds else 'NO'}")
    return "\n".join(lines)
