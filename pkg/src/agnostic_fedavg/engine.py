"""Federated averaging under stochastic participation.

The round loop follows the algorithm box literally: at clock t = 1..T*H a
multiple of H is a communication round (sample, aggregate, broadcast) and
every other tick is one projected minibatch SGD step on every client. Each
H-block therefore holds H-1 local steps.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .availability import MarginalWeights, ParticipationSampler, resolve_marginals, sample_masks
from .data import FederationData
from .errors import ValidationError
from .optimization import (
    ProjectionSet,
    WeightedObjective,
    _mean_gradient,
    draw_minibatch,
    project,
)

CONSTANT = "constant"
INV_SQRT = "inv_sqrt"


@dataclass(frozen=True)
class Agnostic:
    name = "agnostic"


@dataclass(frozen=True)
class Weighted:
    """(N/|S|) * sum_{i in S} p_i theta_i, optionally projected back onto C."""

    p: MarginalWeights
    project: bool = False
    name = "weighted"


AggregationRule = Union[Agnostic, Weighted]


@dataclass(frozen=True)
class RunConfig:
    local_steps: int = 10
    global_rounds: int = 100
    step_size: float = 0.01
    step_rule: str = CONSTANT
    batch_size: int = 10
    radius: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.local_steps < 1:
            raise ValidationError("local_steps (H) must be >= 1")
        if self.global_rounds < 1:
            raise ValidationError("global_rounds (T) must be >= 1")
        if not math.isfinite(self.step_size) or self.step_size < 0:
            raise ValidationError("step_size must be finite and >= 0")
        if self.step_rule not in (CONSTANT, INV_SQRT):
            raise ValidationError(f"step_rule must be {CONSTANT!r} or {INV_SQRT!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        ProjectionSet(self.radius)

    @property
    def eta(self) -> float:
        """Effective step size; ``inv_sqrt`` means step_size / sqrt(T*H)."""
        if self.step_rule == INV_SQRT:
            return self.step_size / math.sqrt(self.global_rounds * self.local_steps)
        return self.step_size

    @property
    def projection(self) -> ProjectionSet:
        return ProjectionSet(self.radius)

    def check(self, data: FederationData) -> None:
        smallest = min(d.n_samples for d in data.datasets)
        if self.batch_size > smallest:
            raise ValidationError(
                f"batch_size {self.batch_size} exceeds smallest client dataset ({smallest})"
            )

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class FederationState:
    client_params: np.ndarray
    last_aggregate: np.ndarray
    sum_of_aggregates: np.ndarray
    clock: int = 0
    rounds: int = 0

    @classmethod
    def initial(cls, n_clients: int, dim: int) -> FederationState:
        return cls(np.zeros((n_clients, dim)), np.zeros(dim), np.zeros(dim))


@dataclass(frozen=True)
class RoundRecord:
    round: int
    subset: tuple[int, ...]
    aggregate: np.ndarray
    objective_aggregate: float | None
    objective_running_avg: float | None
    suboptimality: float | None = None
    max_client_distance: float | None = None

    @property
    def subset_size(self) -> int:
        return len(self.subset)

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "subset": [i + 1 for i in self.subset],
            "subset_size": self.subset_size,
            "aggregate": self.aggregate.tolist(),
            "aggregate_norm": float(np.linalg.norm(self.aggregate)),
            "objective_aggregate": self.objective_aggregate,
            "objective_running_avg": self.objective_running_avg,
            "suboptimality": self.suboptimality,
            "max_client_distance": self.max_client_distance,
        }


@dataclass
class RunTrace:
    rule: str
    config: RunConfig
    records: list[RoundRecord] = field(default_factory=list)
    final_average: np.ndarray | None = None
    final_objective: float | None = None
    f_star: float | None = None
    # (H+1, N, d') client states at ticks SH..SH+H, only when requested
    windows: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.records)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json()) + "\n")

    def summary_rows(self) -> list[dict]:
        return [
            {
                "round": r.round,
                "subset_size": r.subset_size,
                "objective_aggregate": r.objective_aggregate,
                "objective_running_avg": r.objective_running_avg,
                "suboptimality": r.suboptimality,
            }
            for r in self.records
        ]

    def final_state_json(self) -> dict:
        return {
            "rule": self.rule,
            "config": self.config.to_json(),
            "rounds": len(self.records),
            "final_average": None if self.final_average is None else self.final_average.tolist(),
            "final_objective": self.final_objective,
            "f_star": self.f_star,
        }


SUMMARY_FIELDS = ["round", "subset_size", "objective_aggregate", "objective_running_avg",
                  "suboptimality"]


def summary_csv(trace: RunTrace) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in trace.summary_rows():
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def aggregate(subset: Sequence[int], params: np.ndarray, rule: AggregationRule,
              n_clients: int) -> np.ndarray:
    members = np.asarray(list(subset), dtype=int)
    if members.size == 0:
        raise ValidationError("cannot aggregate an empty subset")
    params = np.asarray(params, dtype=float)
    if isinstance(rule, Weighted):
        scaled = n_clients * rule.p.p[members]
        if np.all(scaled == 1.0):
            # uniform weights: identical arithmetic to the plain mean
            return params[members].mean(axis=0)
        return (scaled / members.size) @ params[members]
    return params[members].mean(axis=0)


def averaged_iterate(trace: RunTrace) -> np.ndarray:
    if not trace.records:
        raise ValidationError("trace has no rounds to average")
    return np.mean([r.aggregate for r in trace.records], axis=0)


def client_streams(seed: int, n_clients: int) -> tuple[np.random.Generator, list[np.random.Generator]]:
    """Independent participation stream plus one minibatch stream per client."""
    children = np.random.SeedSequence(seed).spawn(n_clients + 1)
    return np.random.default_rng(children[0]), [np.random.default_rng(c) for c in children[1:]]


def default_objective_weights(sampler: ParticipationSampler, seed: int,
                              draws: int = 100_000) -> MarginalWeights:
    """Exact marginals if enumerable, else a seeded estimate kept apart from run streams."""
    return resolve_marginals(sampler, draws, np.random.default_rng([seed, 0xA11CE]))


def _window_max_distance(states: np.ndarray) -> float:
    pts = states.reshape(-1, states.shape[-1])
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pts @ pts.T
    return float(np.sqrt(max(d2.max(), 0.0)))


def run_fedavg(config: RunConfig, sampler: ParticipationSampler, rule: AggregationRule,
               data: FederationData, *, objective_p: MarginalWeights | None = None,
               f_star: float | None = None, record_windows: bool = False,
               record_distances: bool = False, evaluate: bool = True) -> RunTrace:
    """Run federated averaging and return one record per communication round.

    ``objective_p`` weights the reported objective (defaults to the
    sampler's marginals); ``f_star`` turns objective values into
    suboptimality. ``record_windows`` keeps every client state inside each
    window for divergence checks.
    """
    n = data.n_clients
    if sampler.n_clients != n:
        raise ValidationError(f"sampler covers {sampler.n_clients} clients, data has {n}")
    if isinstance(rule, Weighted) and rule.p.n_clients != n:
        raise ValidationError("weighted rule's p does not match the federation size")
    config.check(data)
    H, T = config.local_steps, config.global_rounds
    eta = config.eta
    C = config.projection
    model = data.model
    feats = [d.features for d in data.datasets]
    targs = [d.targets for d in data.datasets]
    sizes = [d.n_samples for d in data.datasets]

    objective = None
    if evaluate:
        if objective_p is None:
            objective_p = rule.p if isinstance(rule, Weighted) else default_objective_weights(sampler, config.seed)
        objective = WeightedObjective(objective_p, data.datasets, model)

    part_rng, batch_rngs = client_streams(config.seed, n)
    state = FederationState.initial(n, data.param_dim)
    trace = RunTrace(rule.name, config, f_star=f_star)
    windows = [] if (record_windows or record_distances) else None
    current = [state.client_params.copy()] if windows is not None else None

    for t in range(1, T * H + 1):
        state.clock = t
        if t % H == 0:
            subset = tuple(np.flatnonzero(sample_masks(sampler, part_rng, 1)[0]).tolist())
            theta_hat = aggregate(subset, state.client_params, rule, n)
            if isinstance(rule, Weighted) and rule.project:
                theta_hat = project(theta_hat, C)
            state.client_params[:] = theta_hat
            state.last_aggregate = theta_hat
            state.sum_of_aggregates = state.sum_of_aggregates + theta_hat
            state.rounds += 1
            max_dist = None
            if windows is not None:
                current.append(state.client_params.copy())
                block = np.stack(current)
                if record_distances:
                    max_dist = _window_max_distance(block)
                if record_windows:
                    windows.append(block)
                current = [state.client_params.copy()]
            obj_hat = obj_avg = sub = None
            if objective is not None:
                obj_hat = objective.value(theta_hat)
                obj_avg = objective.value(state.sum_of_aggregates / state.rounds)
                if f_star is not None:
                    sub = obj_avg - f_star
            trace.records.append(RoundRecord(state.rounds, subset, theta_hat.copy(), obj_hat,
                                             obj_avg, sub, max_dist))
        else:
            if eta > 0:
                P = state.client_params
                for i in range(n):
                    batch = draw_minibatch(batch_rngs[i], sizes[i], config.batch_size)
                    g = _mean_gradient(P[i], feats[i][batch], targs[i][batch], model)
                    P[i] = project(P[i] - eta * g, C)
            if windows is not None:
                current.append(state.client_params.copy())

    trace.final_average = state.sum_of_aggregates / state.rounds
    if objective is not None:
        trace.final_objective = objective.value(trace.final_average)
    if record_windows:
        trace.windows = windows
    return trace
