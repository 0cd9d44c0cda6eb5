"""Stochastic client participation: subset distributions, samplers, marginals.

Client ids are 0-based in memory. JSON documents and anything printed for a
user carry 1-based ids.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from .errors import CapacityError, ValidationError

PROB_TOL = 1e-12
MAX_BERNOULLI_CLIENTS = 12
MAX_ORDERED_SEQUENCES = 10**6
_CHUNK = 10_000

Subset = tuple[int, ...]


@dataclass(frozen=True)
class SubsetDistribution:
    """Explicit finite distribution over nonempty client subsets."""

    n_clients: int
    atoms: tuple[tuple[Subset, float], ...]

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValidationError(f"n_clients must be >= 1, got {self.n_clients}")
        cleaned = []
        seen = set()
        for subset, prob in self.atoms:
            members = tuple(sorted(int(i) for i in subset))
            if not members:
                raise ValidationError("empty subset atom: q(empty set) must be 0")
            if len(set(members)) != len(members):
                raise ValidationError(f"repeated client id in atom {members}")
            if members[0] < 0 or members[-1] >= self.n_clients:
                raise ValidationError(
                    f"atom {members} has ids outside [0, {self.n_clients})"
                )
            if members in seen:
                raise ValidationError(f"duplicate atom {members}")
            prob = float(prob)
            if not math.isfinite(prob) or prob < 0.0 or prob > 1.0:
                raise ValidationError(f"atom probability {prob} outside [0, 1]")
            seen.add(members)
            cleaned.append((members, prob))
        if not cleaned:
            raise ValidationError("distribution has no atoms")
        total = math.fsum(p for _, p in cleaned)
        if abs(total - 1.0) > PROB_TOL:
            raise ValidationError(f"atom probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "atoms", tuple(cleaned))

    @classmethod
    def from_dict(cls, n_clients: int, probs: dict) -> SubsetDistribution:
        return cls(n_clients, tuple((tuple(k), v) for k, v in probs.items()))

    def as_dict(self) -> dict[Subset, float]:
        return dict(self.atoms)

    def to_json(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "atoms": [
                {"subset": [i + 1 for i in subset], "prob": prob}
                for subset, prob in self.atoms
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> SubsetDistribution:
        try:
            n = int(doc["n_clients"])
            atoms = tuple(
                (tuple(int(i) - 1 for i in atom["subset"]), float(atom["prob"]))
                for atom in doc["atoms"]
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed subset distribution: {exc}") from exc
        return cls(n, atoms)


@dataclass(frozen=True)
class MarginalWeights:
    """Marginal survival weights p with an optional Monte-Carlo stderr."""

    p: np.ndarray
    stderr: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("p must be a nonempty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValidationError("p must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError(f"p sums to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)
        if self.stderr is not None:
            se = np.asarray(self.stderr, dtype=float)
            if se.shape != p.shape:
                raise ValidationError("stderr shape differs from p")
            se.setflags(write=False)
            object.__setattr__(self, "stderr", se)

    @property
    def n_clients(self) -> int:
        return self.p.size

    @classmethod
    def uniform(cls, n_clients: int) -> MarginalWeights:
        return cls(np.full(n_clients, 1.0 / n_clients))

    def to_json(self) -> dict:
        return {
            "p": self.p.tolist(),
            "stderr": None if self.stderr is None else self.stderr.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> MarginalWeights:
        return cls(np.asarray(doc["p"], float), doc.get("stderr"))


@dataclass(frozen=True)
class ExplicitSampler:
    distribution: SubsetDistribution
    _subsets: tuple = field(init=False, repr=False, compare=False)
    _cum: np.ndarray = field(init=False, repr=False, compare=False)
    _masks: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        subsets = tuple(s for s, _ in self.distribution.atoms)
        probs = np.array([q for _, q in self.distribution.atoms])
        masks = np.zeros((len(subsets), self.distribution.n_clients), dtype=bool)
        for k, subset in enumerate(subsets):
            masks[k, list(subset)] = True
        object.__setattr__(self, "_subsets", subsets)
        object.__setattr__(self, "_cum", np.cumsum(probs))
        object.__setattr__(self, "_masks", masks)

    @property
    def n_clients(self) -> int:
        return self.distribution.n_clients

    def _draw_masks(self, rng: np.random.Generator, draws: int) -> np.ndarray:
        u = rng.random(draws) * self._cum[-1]
        # atoms with q=0 never get picked: their cumsum step is flat
        idx = np.searchsorted(self._cum, u, side="right")
        idx = np.minimum(idx, len(self._subsets) - 1)
        return self._masks[idx]


@dataclass(frozen=True)
class FixedSizeWeightedSampler:
    """M distinct clients by successive draws proportional to remaining weight."""

    weights: tuple[float, ...]
    size: int

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if not w:
            raise ValidationError("weights must be nonempty")
        if any(not math.isfinite(x) or x <= 0 for x in w):
            raise ValidationError("all weights must be finite and > 0")
        if not 1 <= self.size <= len(w):
            raise ValidationError(f"size must lie in [1, {len(w)}], got {self.size}")

    @classmethod
    def exponential(cls, n_clients: int, size: int, beta: float) -> FixedSizeWeightedSampler:
        """Weights exp(-(i-1)/beta) for 1-based i; beta=inf gives uniform."""
        i = np.arange(n_clients)
        w = np.ones(n_clients) if math.isinf(beta) else np.exp(-i / beta)
        return cls(tuple(w.tolist()), size)

    @property
    def n_clients(self) -> int:
        return len(self.weights)

    def _draw_masks(self, rng: np.random.Generator, draws: int) -> np.ndarray:
        n = self.n_clients
        remaining = np.tile(np.asarray(self.weights), (draws, 1))
        masks = np.zeros((draws, n), dtype=bool)
        rows = np.arange(draws)
        for _ in range(self.size):
            cs = np.cumsum(remaining, axis=1)
            u = rng.random(draws) * cs[:, -1]
            pick = (cs <= u[:, None]).sum(axis=1)
            # u rounding up to the row total: fall back to the last live client
            overflow = pick >= n
            if overflow.any():
                live = remaining[overflow] > 0
                pick[overflow] = n - 1 - np.argmax(live[:, ::-1], axis=1)
            masks[rows, pick] = True
            remaining[rows, pick] = 0.0
        return masks


@dataclass(frozen=True)
class BernoulliSampler:
    """Independent per-client availability, conditioned on a nonempty round."""

    probs: tuple[float, ...]

    def __post_init__(self):
        q = tuple(float(x) for x in self.probs)
        object.__setattr__(self, "probs", q)
        if not q:
            raise ValidationError("probs must be nonempty")
        if any(not 0.0 <= x <= 1.0 for x in q):
            raise ValidationError("per-client probabilities must lie in [0, 1]")
        if max(q) <= 0.0:
            raise ValidationError("at least one client needs a positive probability")

    @property
    def n_clients(self) -> int:
        return len(self.probs)

    def _draw_masks(self, rng: np.random.Generator, draws: int) -> np.ndarray:
        probs = np.asarray(self.probs)
        masks = rng.random((draws, self.n_clients)) < probs
        empty = ~masks.any(axis=1)
        while empty.any():
            redo = rng.random((int(empty.sum()), self.n_clients)) < probs
            masks[empty] = redo
            empty = ~masks.any(axis=1)
        return masks


ParticipationSampler = Union[ExplicitSampler, FixedSizeWeightedSampler, BernoulliSampler]


def compute_marginals_exact(dist: SubsetDistribution) -> MarginalWeights:
    p = np.zeros(dist.n_clients)
    for subset, q in dist.atoms:
        p[list(subset)] += q / len(subset)
    return MarginalWeights(p)


def sample_subset(sampler: ParticipationSampler, rng: np.random.Generator) -> Subset:
    """Draw one nonempty available subset as a sorted tuple of 0-based ids."""
    mask = sampler._draw_masks(rng, 1)[0]
    return tuple(np.flatnonzero(mask).tolist())


def sample_masks(sampler: ParticipationSampler, rng: np.random.Generator,
                 draws: int) -> np.ndarray:
    """Boolean (draws, N) membership matrix; row k equals the k-th sample_subset."""
    return sampler._draw_masks(rng, draws)


def _fixed_size_distribution(sampler: FixedSizeWeightedSampler) -> SubsetDistribution:
    n, m = sampler.n_clients, sampler.size
    if math.perm(n, m) > MAX_ORDERED_SEQUENCES:
        raise CapacityError(
            f"{math.perm(n, m)} ordered draw sequences exceed {MAX_ORDERED_SEQUENCES}"
        )
    w = np.asarray(sampler.weights)
    total = w.sum()
    # probability that the first k draws are exactly the set (any order);
    # summing over the last-drawn member factors the sum over orderings
    level: dict[frozenset, float] = {frozenset(): 1.0}
    for _ in range(m):
        nxt: dict[frozenset, float] = {}
        for drawn, prob in level.items():
            left = total - sum(w[j] for j in drawn)
            for i in range(n):
                if i in drawn:
                    continue
                key = drawn | {i}
                nxt[key] = nxt.get(key, 0.0) + prob * w[i] / left
        level = nxt
    atoms = tuple((tuple(sorted(s)), q) for s, q in sorted(level.items(), key=lambda kv: sorted(kv[0])))
    return _renormalized(n, atoms)


def _bernoulli_distribution(sampler: BernoulliSampler) -> SubsetDistribution:
    n = sampler.n_clients
    if n > MAX_BERNOULLI_CLIENTS:
        raise CapacityError(f"Bernoulli enumeration limited to N <= {MAX_BERNOULLI_CLIENTS}")
    probs = sampler.probs
    atoms = []
    for bits in itertools.product((False, True), repeat=n):
        if not any(bits):
            continue
        q = math.prod(pi if b else 1.0 - pi for pi, b in zip(probs, bits))
        if q > 0.0:
            atoms.append((tuple(i for i, b in enumerate(bits) if b), q))
    return _renormalized(n, tuple(atoms))


def _renormalized(n: int, atoms: tuple) -> SubsetDistribution:
    total = math.fsum(q for _, q in atoms)
    return SubsetDistribution(n, tuple((s, q / total) for s, q in atoms))


def enumerate_sampler_distribution(sampler: ParticipationSampler) -> SubsetDistribution:
    if isinstance(sampler, ExplicitSampler):
        return sampler.distribution
    if isinstance(sampler, FixedSizeWeightedSampler):
        return _fixed_size_distribution(sampler)
    if isinstance(sampler, BernoulliSampler):
        return _bernoulli_distribution(sampler)
    raise TypeError(f"unknown sampler type {type(sampler).__name__}")


def estimate_marginals(sampler: ParticipationSampler, draws: int,
                       rng: np.random.Generator) -> MarginalWeights:
    """Monte-Carlo average of 1[i in S]/|S| over independent rounds."""
    if draws < 1:
        raise ValidationError(f"draws must be >= 1, got {draws}")
    n = sampler.n_clients
    s1 = np.zeros(n)
    s2 = np.zeros(n)
    done = 0
    while done < draws:
        k = min(_CHUNK, draws - done)
        masks = sampler._draw_masks(rng, k)
        contrib = masks / masks.sum(axis=1, keepdims=True)
        s1 += contrib.sum(axis=0)
        s2 += (contrib**2).sum(axis=0)
        done += k
    p = s1 / draws
    if draws > 1:
        var = np.maximum(s2 - draws * p**2, 0.0) / (draws - 1)
        stderr = np.sqrt(var / draws)
    else:
        stderr = np.zeros(n)
    # sum to one is exact in exact arithmetic; absorb float drift
    p = p / p.sum()
    return MarginalWeights(p, stderr)


def is_exchangeable(sampler: ParticipationSampler) -> bool:
    """True when relabelling clients leaves the sampler unchanged (uniform marginals)."""
    if isinstance(sampler, FixedSizeWeightedSampler):
        return len(set(sampler.weights)) == 1
    if isinstance(sampler, BernoulliSampler):
        return len(set(sampler.probs)) == 1
    return False


def resolve_marginals(sampler: ParticipationSampler, draws: int = 100_000,
                      rng: np.random.Generator | None = None) -> MarginalWeights:
    """Exact marginals when available, otherwise a Monte-Carlo estimate.

    Exchangeable samplers get exactly uniform weights without enumeration.
    """
    if is_exchangeable(sampler):
        return MarginalWeights.uniform(sampler.n_clients)
    try:
        return compute_marginals_exact(enumerate_sampler_distribution(sampler))
    except CapacityError:
        if rng is None:
            rng = np.random.default_rng(0)
        return estimate_marginals(sampler, draws, rng)


def participation_skew(p: MarginalWeights | Iterable[float]) -> float:
    """L1 distance of p from the uniform distribution."""
    vec = p.p if isinstance(p, MarginalWeights) else np.asarray(list(p), float)
    return float(np.abs(vec - 1.0 / vec.size).sum())


def sampler_from_json(doc: dict) -> ParticipationSampler:
    """Build a sampler from its JSON descriptor.

    Kinds: ``explicit`` (``distribution``, or the subset-distribution fields
    inline; a bare subset distribution without ``kind`` also works), ``fixed_size_weighted``
    (``size`` plus either ``weights`` or ``n_clients`` and ``beta``),
    ``bernoulli`` (``probs``).
    """
    try:
        kind = doc["kind"] if "kind" in doc or "atoms" not in doc else "explicit"
        if kind == "explicit":
            return ExplicitSampler(SubsetDistribution.from_json(doc.get("distribution", doc)))
        if kind == "fixed_size_weighted":
            if "weights" in doc:
                return FixedSizeWeightedSampler(tuple(doc["weights"]), int(doc["size"]))
            beta = doc.get("beta", "inf")
            return FixedSizeWeightedSampler.exponential(
                int(doc["n_clients"]), int(doc["size"]), float(beta))
        if kind == "bernoulli":
            return BernoulliSampler(tuple(doc["probs"]))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed sampler descriptor: missing {exc}") from exc
    raise ValidationError(f"unknown sampler kind {doc.get('kind')!r}")


def sampler_to_json(sampler: ParticipationSampler) -> dict:
    if isinstance(sampler, ExplicitSampler):
        return {"kind": "explicit", "distribution": sampler.distribution.to_json()}
    if isinstance(sampler, FixedSizeWeightedSampler):
        return {"kind": "fixed_size_weighted", "weights": list(sampler.weights),
                "size": sampler.size}
    return {"kind": "bernoulli", "probs": list(sampler.probs)}
