"""Numerical checks of the convergence argument for agnostic FedAvg.

Each checker evaluates both sides of one displayed inequality and returns an
:class:`InequalityReport`. Conditional expectations are computed exactly
(subset atoms, minibatch enumeration) when that is cheap, otherwise by Monte
Carlo with the tolerance widened by three standard errors.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .availability import (
    MarginalWeights,
    ParticipationSampler,
    SubsetDistribution,
    compute_marginals_exact,
    participation_skew,
)
from .data import FederationData
from .engine import Agnostic, RunConfig, Weighted, default_objective_weights, run_fedavg
from .errors import InsufficientDataError, ValidationError
from .optimization import (
    ClientDataset,
    Constants,
    LossModel,
    ProjectionSet,
    estimate_constants,
    local_loss,
    sgd_step,
    solve_reference_optimum,
)

MAX_BATCH_ENUMERATION = 20_000


@dataclass(frozen=True)
class InequalityReport:
    name: str
    lhs: float
    rhs: float
    tolerance: float
    samples: int = 1
    details: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.slack >= -self.tolerance

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "lhs": float(self.lhs),
            "rhs": float(self.rhs),
            "slack": float(self.slack),
            "tolerance": float(self.tolerance),
            "samples": int(self.samples),
            "holds": bool(self.holds),
            "details": _plain(self.details),
        }


def _plain(obj):
    """Convert numpy scalars and arrays nested in ``obj`` to JSON types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass(frozen=True)
class RateFit:
    horizons: tuple[int, ...]
    suboptimalities: tuple[float, ...]
    slope: float
    intercept: float
    r2: float
    excluded: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {
            "horizons": list(self.horizons),
            "suboptimalities": list(self.suboptimalities),
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "excluded": list(self.excluded),
        }


def check_sample_to_model(dist: SubsetDistribution, client_params: np.ndarray,
                          theta_star: np.ndarray, tolerance: float = 1e-10) -> InequalityReport:
    """Expected squared error of the subset mean vs the p-weighted client errors."""
    params = np.asarray(client_params, dtype=float)
    if params.shape[0] != dist.n_clients:
        raise ValidationError(f"{params.shape[0]} parameter vectors for {dist.n_clients} clients")
    theta_star = np.asarray(theta_star, dtype=float)
    lhs = 0.0
    for subset, q in dist.atoms:
        diff = params[list(subset)].mean(axis=0) - theta_star
        lhs += q * float(diff @ diff)
    p = compute_marginals_exact(dist).p
    errs = np.sum((params - theta_star) ** 2, axis=1)
    rhs = float(p @ errs)
    return InequalityReport("sample_to_model", lhs, rhs, tolerance, len(dist.atoms))


def _batches(n: int, b: int, rng: np.random.Generator, mc_draws: int):
    count = math.comb(n, b)
    if count <= MAX_BATCH_ENUMERATION:
        return [np.array(c) for c in itertools.combinations(range(n), b)], True
    return [rng.choice(n, size=b, replace=False) for _ in range(mc_draws)], False


def check_one_step_progress(theta: np.ndarray, client: ClientDataset, model: LossModel,
                            eta: float, C: ProjectionSet, theta_star: np.ndarray,
                            mc_draws: int, rng: np.random.Generator, *, batch_size: int,
                            G: float, sigma_sq: float) -> InequalityReport:
    """One projected SGD step: E||theta' - theta*||^2 against the descent bound.

    The expectation over the minibatch is exact when all C(n, b) batches
    can be enumerated, otherwise Monte Carlo with a 3-stderr tolerance.
    """
    theta = np.asarray(theta, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    batches, exact = _batches(client.n_samples, batch_size, rng, max(mc_draws, 1))
    dists = np.array([
        float(np.sum((sgd_step(theta, client, model, b, eta, C) - theta_star) ** 2))
        for b in batches
    ])
    lhs = float(dists.mean())
    tol = 1e-10
    if not exact and dists.size > 1:
        tol += 3.0 * float(dists.std(ddof=1)) / math.sqrt(dists.size)
    start = float(np.sum((theta - theta_star) ** 2))
    gap = local_loss(theta, client, model) - local_loss(theta_star, client, model)
    rhs = start - 2.0 * eta * gap + 2.0 * eta**2 * sigma_sq + 2.0 * eta**2 * G**2
    details = {
        "exact": exact,
        "eta": eta,
        "G": G,
        "sigma_sq": sigma_sq,
        # per-step constants used later in the recursive descent (3 eta^2 G^2)
        "rhs_recursive_constants": start - 2.0 * eta * gap + 2.0 * eta**2 * sigma_sq
        + 3.0 * eta**2 * G**2,
    }
    return InequalityReport("one_step_progress", lhs, rhs, tol, len(batches), details)


@dataclass(frozen=True)
class _WindowStats:
    max_param_gap: float
    max_value_gap: float
    windows: int
    constants: Constants
    eta: float
    H: int


def _window_statistics(config: RunConfig, sampler: ParticipationSampler, data: FederationData,
                       seeds: int, constants: Constants | None, theta_samples: int) -> _WindowStats:
    if seeds < 1:
        raise ValidationError("seeds must be >= 1")
    p = default_objective_weights(sampler, config.seed)
    if constants is None:
        constants = estimate_constants(data.model, data.datasets, config.projection, theta_samples,
                                       np.random.default_rng([config.seed, 0xC0457]),
                                       config.batch_size, p)
    n = data.n_clients
    param_sum = None
    value_sum = None
    for k in range(seeds):
        run_cfg = replace(config, seed=config.seed + k)
        trace = run_fedavg(run_cfg, sampler, Agnostic(), data, record_windows=True, evaluate=False)
        blocks = np.stack(trace.windows)  # (T, H+1, N, d')
        T, K = blocks.shape[0], blocks.shape[1]
        pts = blocks.reshape(T, K * n, -1)
        sq = np.sum(pts * pts, axis=2)
        d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * np.einsum("tad,tbd->tab", pts, pts)
        pdist = np.sqrt(np.maximum(d2, 0.0))
        # losses[t, i, a]: client i's loss at point a of window t
        losses = np.empty((T, n, K * n))
        for t in range(T):
            for i, ds in enumerate(data.datasets):
                losses[t, i] = [local_loss(x, ds, data.model) for x in pts[t]]
        # value gap uses f_i of the first point's owner, point a = (tau, i)
        owner = np.tile(np.arange(n), K)
        own = losses[:, owner, np.arange(K * n)]  # f_owner(a)(a)
        cross = losses[:, owner, :]  # f_owner(a)(b)
        vgap = np.abs(own[:, :, None] - cross)
        param_sum = pdist if param_sum is None else param_sum + pdist
        value_sum = vgap if value_sum is None else value_sum + vgap
    # only pairs of distinct clients enter the bound
    distinct = owner[:, None] != owner[None, :]
    if not distinct.any():
        return _WindowStats(0.0, 0.0, param_sum.shape[0], constants, config.eta, config.local_steps)
    return _WindowStats(float((param_sum / seeds)[:, distinct].max()),
                        float((value_sum / seeds)[:, distinct].max()),
                        param_sum.shape[0], constants, config.eta, config.local_steps)


def check_local_divergence(config: RunConfig, sampler: ParticipationSampler, data: FederationData,
                           seeds: int, constants: Constants | None = None,
                           theta_samples: int = 200) -> InequalityReport:
    """Seed-averaged in-window distances between distinct clients against 4 eta G H."""
    st = _window_statistics(config, sampler, data, seeds, constants, theta_samples)
    rhs = 4.0 * st.eta * st.constants.G * st.H
    c = st.constants
    return InequalityReport("local_divergence", st.max_param_gap, rhs, 1e-12, seeds,
                            {"windows": st.windows, "G": c.G, "sigma_sq": c.sigma_sq,
                             "lipschitz": c.lipschitz, "eta": st.eta, "H": st.H})


def check_value_divergence(config: RunConfig, sampler: ParticipationSampler, data: FederationData,
                           seeds: int, constants: Constants | None = None,
                           theta_samples: int = 200) -> InequalityReport:
    """Seed-averaged in-window loss gaps against 2 l eta G H."""
    st = _window_statistics(config, sampler, data, seeds, constants, theta_samples)
    c = st.constants
    rhs = 2.0 * c.lipschitz * st.eta * c.G * st.H
    return InequalityReport("value_divergence", st.max_value_gap, rhs, 1e-12, seeds,
                            {"windows": st.windows, "G": c.G, "sigma_sq": c.sigma_sq,
                             "lipschitz": c.lipschitz, "eta": st.eta, "H": st.H})


def fit_rate(runs: Mapping[int, float]) -> RateFit:
    """Least-squares slope of log suboptimality against log T."""
    items = sorted((int(T), float(v)) for T, v in runs.items())
    kept = [(T, v) for T, v in items if v > 0 and math.isfinite(v)]
    dropped = tuple(T for T, v in items if not (v > 0 and math.isfinite(v)))
    if dropped:
        warnings.warn(f"excluding horizons with nonpositive suboptimality: {dropped}")
    if len(kept) < 2:
        raise InsufficientDataError("rate fit needs at least two positive suboptimalities")
    x = np.log([T for T, _ in kept])
    y = np.log([v for _, v in kept])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(tuple(T for T, _ in kept), tuple(v for _, v in kept), float(slope),
                   float(intercept), r2, dropped)


def rate_sweep(config: RunConfig, sampler: ParticipationSampler, data: FederationData,
               horizons: Sequence[int], scale: float) -> tuple[RateFit, dict[int, float]]:
    """Suboptimality of the averaged iterate for each T with eta = scale / sqrt(T H)."""
    p = default_objective_weights(sampler, config.seed)
    opt = solve_reference_optimum(p, data.datasets, data.model, config.projection)
    runs = {}
    for T in horizons:
        cfg = replace(config, global_rounds=int(T), step_size=scale, step_rule="inv_sqrt")
        trace = run_fedavg(cfg, sampler, Agnostic(), data, objective_p=p, f_star=opt.value)
        runs[int(T)] = trace.final_objective - opt.value
    return fit_rate(runs), runs


@dataclass(frozen=True)
class RuleComparison:
    seed: int
    agnostic: float
    weighted: float
    skew: float

    @property
    def difference(self) -> float:
        return self.weighted - self.agnostic


def compare_rules(config: RunConfig, sampler: ParticipationSampler, data: FederationData,
                  seeds: Sequence[int], p: MarginalWeights | None = None,
                  project_weighted: bool = False) -> list[RuleComparison]:
    """Final averaged-iterate objective of both rules on shared seeds."""
    if p is None:
        p = default_objective_weights(sampler, config.seed)
    skew = participation_skew(p)
    out = []
    for seed in seeds:
        cfg = replace(config, seed=int(seed))
        a = run_fedavg(cfg, sampler, Agnostic(), data, objective_p=p)
        w = run_fedavg(cfg, sampler, Weighted(p, project_weighted), data, objective_p=p)
        out.append(RuleComparison(int(seed), a.final_objective, w.final_objective, skew))
    return out


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Correlation coefficient, or None when either side has zero variance."""
    x = np.asarray(xs, float)
    y = np.asarray(ys, float)
    if x.size < 2:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return None
    return float(dx @ dy) / denom
