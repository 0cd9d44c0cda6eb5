"""Convex local losses, minibatch gradients, ball projection and the p-weighted objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

from .availability import MarginalWeights
from .errors import ValidationError

SQUARED_ERROR = "squared_error"
MULTINOMIAL_LOGISTIC = "multinomial_logistic"

# above this parameter dimension the reference solver skips Newton steps
NEWTON_MAX_DIM = 600


@dataclass(frozen=True)
class ClientDataset:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.targets)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValidationError("features must be an (n, d) matrix with n >= 1")
        if y.shape != (X.shape[0],):
            raise ValidationError(f"targets shape {y.shape} does not match {X.shape[0]} rows")
        if not np.all(np.isfinite(X)):
            raise ValidationError("features contain non-finite entries")
        X.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class LossModel:
    """Linear predictor plus loss: least squares or softmax cross-entropy."""

    kind: str = SQUARED_ERROR
    n_classes: int | None = None

    def __post_init__(self):
        if self.kind not in (SQUARED_ERROR, MULTINOMIAL_LOGISTIC):
            raise ValidationError(f"unknown loss kind {self.kind!r}")
        if self.kind == MULTINOMIAL_LOGISTIC and (self.n_classes or 0) < 2:
            raise ValidationError("multinomial logistic needs n_classes >= 2")

    @classmethod
    def squared_error(cls) -> LossModel:
        return cls(SQUARED_ERROR)

    @classmethod
    def logistic(cls, n_classes: int) -> LossModel:
        return cls(MULTINOMIAL_LOGISTIC, n_classes)

    def param_dim(self, feature_dim: int) -> int:
        if self.kind == SQUARED_ERROR:
            return feature_dim
        return self.n_classes * feature_dim

    def check(self, theta: np.ndarray, data: ClientDataset) -> None:
        if theta.shape != (self.param_dim(data.dim),):
            raise ValidationError(
                f"parameter shape {theta.shape} incompatible with feature dim {data.dim}"
            )
        if self.kind == MULTINOMIAL_LOGISTIC:
            y = data.targets
            if np.any((y < 0) | (y >= self.n_classes)):
                raise ValidationError(f"class labels must lie in [0, {self.n_classes})")

    def to_json(self) -> dict:
        return {"kind": self.kind, "n_classes": self.n_classes}


@dataclass(frozen=True)
class ProjectionSet:
    """Origin-centred Euclidean ball of radius R."""

    radius: float

    def __post_init__(self):
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise ValidationError(f"radius must be finite and positive, got {self.radius}")


class ReferenceOptimum(NamedTuple):
    theta: np.ndarray
    value: float
    method: str
    grad_mapping_norm: float


def logsumexp(Z, axis=1):
    # plain numpy: scipy's version costs far more per call on small arrays
    m = Z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(Z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def softmax(Z, axis=1):
    E = np.exp(Z - Z.max(axis=axis, keepdims=True))
    return E / E.sum(axis=axis, keepdims=True)


def _logits(theta, X, n_classes):
    return X @ theta.reshape(n_classes, -1).T


def _residual_loss(theta, X, y, model):
    if model.kind == SQUARED_ERROR:
        r = X @ theta - y
        return float(np.mean(r * r))
    Z = _logits(theta, X, model.n_classes)
    picked = Z[np.arange(len(y)), y.astype(int)]
    return float(np.mean(logsumexp(Z, axis=1) - picked))


def _mean_gradient(theta, X, y, model):
    n = X.shape[0]
    if model.kind == SQUARED_ERROR:
        return 2.0 * (X.T @ (X @ theta - y)) / n
    S = softmax(_logits(theta, X, model.n_classes), axis=1)
    S[np.arange(n), y.astype(int)] -= 1.0
    return (S.T @ X).ravel() / n


def per_sample_gradients(theta: np.ndarray, data: ClientDataset, model: LossModel) -> np.ndarray:
    """(n, d') matrix whose row j is the gradient of sample j's loss."""
    X, y = data.features, data.targets
    if model.kind == SQUARED_ERROR:
        return (2.0 * (X @ theta - y))[:, None] * X
    S = softmax(_logits(theta, X, model.n_classes), axis=1)
    S[np.arange(len(y)), y.astype(int)] -= 1.0
    return (S[:, :, None] * X[:, None, :]).reshape(len(y), -1)


def local_loss(theta: np.ndarray, data: ClientDataset, model: LossModel) -> float:
    theta = np.asarray(theta, dtype=float)
    model.check(theta, data)
    return _residual_loss(theta, data.features, data.targets, model)


def full_gradient(theta: np.ndarray, data: ClientDataset, model: LossModel) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    model.check(theta, data)
    return _mean_gradient(theta, data.features, data.targets, model)


def draw_minibatch(rng: np.random.Generator, n_samples: int, batch_size: int) -> np.ndarray:
    """Uniform size-b subset of sample indices, without replacement."""
    if not 1 <= batch_size <= n_samples:
        raise ValidationError(f"batch size {batch_size} outside [1, {n_samples}]")
    if batch_size == n_samples:
        return np.arange(n_samples)
    return rng.choice(n_samples, size=batch_size, replace=False)


def minibatch_gradient(theta: np.ndarray, data: ClientDataset, model: LossModel,
                       batch: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    model.check(theta, data)
    batch = np.asarray(batch, dtype=int)
    if batch.ndim != 1 or batch.size == 0:
        raise ValidationError("minibatch must be a nonempty index vector")
    if batch.min() < 0 or batch.max() >= data.n_samples:
        raise ValidationError("minibatch index out of range")
    if np.unique(batch).size != batch.size:
        raise ValidationError("minibatch indices must be distinct")
    return _mean_gradient(theta, data.features[batch], data.targets[batch], model)


def project(theta: np.ndarray, C: ProjectionSet) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    norm = np.linalg.norm(theta)
    if norm <= C.radius:
        return theta.copy()
    return theta * (C.radius / norm)


def sgd_step(theta: np.ndarray, data: ClientDataset, model: LossModel, batch: np.ndarray,
             step_size: float, C: ProjectionSet) -> np.ndarray:
    if step_size < 0:
        raise ValidationError(f"step size must be nonnegative, got {step_size}")
    if step_size == 0:
        return project(theta, C)
    g = minibatch_gradient(theta, data, model, batch)
    return project(np.asarray(theta, dtype=float) - step_size * g, C)


def _weights(p) -> np.ndarray:
    return p.p if isinstance(p, MarginalWeights) else np.asarray(p, dtype=float)


def global_objective(theta: np.ndarray, p: MarginalWeights, datasets: Sequence[ClientDataset],
                     model: LossModel) -> float:
    w = _weights(p)
    if w.size != len(datasets):
        raise ValidationError(f"{w.size} weights for {len(datasets)} clients")
    return float(sum(wi * local_loss(theta, d, model) for wi, d in zip(w, datasets) if wi != 0.0))


def global_gradient(theta: np.ndarray, p: MarginalWeights, datasets: Sequence[ClientDataset],
                    model: LossModel) -> np.ndarray:
    w = _weights(p)
    if w.size != len(datasets):
        raise ValidationError(f"{w.size} weights for {len(datasets)} clients")
    g = np.zeros(model.param_dim(datasets[0].dim))
    for wi, d in zip(w, datasets):
        if wi != 0.0:
            g += wi * full_gradient(theta, d, model)
    return g


class WeightedObjective:
    """The p-weighted objective over all clients, stacked into one sample matrix.

    Each sample of client i carries weight p_i / n_i, so value and gradient
    are single matrix products. Agrees with global_objective/global_gradient.
    """

    def __init__(self, p, datasets: Sequence[ClientDataset], model: LossModel):
        w = _weights(p)
        if w.size != len(datasets):
            raise ValidationError(f"{w.size} weights for {len(datasets)} clients")
        keep = [i for i in range(len(datasets)) if w[i] != 0.0]
        self.model = model
        self.X = np.concatenate([datasets[i].features for i in keep])
        self.y = np.concatenate([datasets[i].targets for i in keep])
        self.sw = np.concatenate([np.full(datasets[i].n_samples, w[i] / datasets[i].n_samples)
                                  for i in keep])
        self.dim = model.param_dim(datasets[0].dim)

    def value(self, theta: np.ndarray) -> float:
        X, y, m = self.X, self.y, self.model
        if m.kind == SQUARED_ERROR:
            r = X @ theta - y
            return float(self.sw @ (r * r))
        Z = _logits(theta, X, m.n_classes)
        picked = Z[np.arange(len(y)), y.astype(int)]
        return float(self.sw @ (logsumexp(Z, axis=1) - picked))

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        X, y, m = self.X, self.y, self.model
        if m.kind == SQUARED_ERROR:
            return 2.0 * (X.T @ (self.sw * (X @ theta - y)))
        S = softmax(_logits(theta, X, m.n_classes), axis=1)
        S[np.arange(len(y)), y.astype(int)] -= 1.0
        return ((S * self.sw[:, None]).T @ X).ravel()

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        X, m = self.X, self.model
        if m.kind == SQUARED_ERROR:
            return 2.0 * self.gram()
        S = softmax(_logits(theta, X, m.n_classes), axis=1)
        A = -S[:, :, None] * S[:, None, :]
        idx = np.arange(m.n_classes)
        A[:, idx, idx] += S
        A *= self.sw[:, None, None]
        H = np.einsum("jab,jk,jl->akbl", A, X, X)
        return H.reshape(self.dim, self.dim)

    def gram(self) -> np.ndarray:
        return (self.X * self.sw[:, None]).T @ self.X

    def smoothness(self) -> float:
        """Upper bound on the Lipschitz constant of the gradient."""
        lam = float(np.linalg.eigvalsh(self.gram())[-1])
        if self.model.kind == SQUARED_ERROR:
            return max(2.0 * lam, 1e-12)
        # softmax Jacobian diag(s) - s s^T has spectral norm <= 1/2
        return max(0.5 * lam, 1e-12)

    def gradient_mapping_norm(self, theta: np.ndarray, C: ProjectionSet) -> float:
        step = 1.0 / self.smoothness()
        return float(np.linalg.norm(theta - project(theta - step * self.gradient(theta), C)) / step)


def _projected_gradient(obj: WeightedObjective, x0, C, tol, max_iter):
    """FISTA on the ball with function-value restart."""
    step = 1.0 / obj.smoothness()
    x = project(x0, C)
    fx = obj.value(x)
    y = x.copy()
    t = 1.0
    gm = np.inf
    for _ in range(max_iter):
        gx = obj.gradient(x)
        gm = np.linalg.norm(x - project(x - step * gx, C)) / step
        if gm < tol:
            break
        x_next = project(y - step * obj.gradient(y), C)
        f_next = obj.value(x_next)
        if f_next > fx:
            y, t = x.copy(), 1.0
            continue
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_next + ((t - 1.0) / t_next) * (x_next - x)
        x, fx, t = x_next, f_next, t_next
    return x, float(gm)


def _ridge_newton(obj: WeightedObjective, lam: float, x0: np.ndarray,
                  max_iter: int = 100) -> np.ndarray:
    """Damped Newton minimization of f(x) + lam/2 ||x||^2."""
    x = x0.copy()
    eye = np.eye(obj.dim)

    def f(z):
        return obj.value(z) + 0.5 * lam * float(z @ z)

    def grad(z):
        return obj.gradient(z) + lam * z

    fx, g = f(x), grad(x)
    for _ in range(max_iter):
        step = np.linalg.lstsq(obj.hessian(x) + lam * eye, g, rcond=None)[0]
        dec = float(g @ step)
        if not dec > 0.0:
            break
        if dec < 1e-12 * max(1.0, abs(fx)):
            # decrease is below the resolution of f: keep the full step only
            # while it still shrinks the gradient
            cand = x - step
            g_cand = grad(cand)
            if np.linalg.norm(g_cand) >= np.linalg.norm(g):
                break
            x, fx, g = cand, f(cand), g_cand
            continue
        t = 1.0
        for _ in range(40):
            cand = x - t * step
            fc = f(cand)
            if fc <= fx - 0.25 * t * dec:
                break
            t *= 0.5
        else:
            break
        x, fx, g = cand, fc, grad(cand)
    return x


def _newton_on_ball(obj: WeightedObjective, C: ProjectionSet) -> np.ndarray:
    """Exact minimizer over the ball from the KKT condition grad f + lam x = 0.

    The norm of the ridge solution x(lam) decreases in lam, so the active
    multiplier is a scalar root. At lam = |grad f(0)| / R strong convexity
    already puts x(lam) inside the ball.
    """
    R = C.radius
    zero = np.zeros(obj.dim)
    g0 = float(np.linalg.norm(obj.gradient(zero)))
    if g0 == 0.0:
        return zero
    hi = g0 / R
    cache = {}

    def solve(lam):
        if lam not in cache:
            start = min(cache.items(), key=lambda kv: abs(kv[0] - lam))[1] if cache else zero
            cache[lam] = _ridge_newton(obj, lam, start)
        return cache[lam]

    lo = hi
    while np.linalg.norm(solve(lo)) <= R:
        lo *= 0.25
        if lo < 1e-14 * hi:
            # interior minimizer: the ridge path stays in the ball as lam -> 0
            x = _ridge_newton(obj, 0.0, solve(lo))
            if np.linalg.norm(x) <= R:
                return x
            break
    lam = brentq(lambda t: float(np.linalg.norm(solve(t))) - R, lo, hi, xtol=1e-300, rtol=1e-15)
    return project(solve(lam), C)


def solve_reference_optimum(p: MarginalWeights, datasets: Sequence[ClientDataset],
                            model: LossModel, C: ProjectionSet, tol: float = 1e-10,
                            max_iter: int = 100_000) -> ReferenceOptimum:
    """Minimizer of the p-weighted objective over the ball.

    Least squares with an interior unconstrained minimizer is solved from
    the weighted normal equations. Small problems otherwise use Newton
    steps on the ball's KKT system; large ones (and any Newton result that
    misses ``tol``) run accelerated projected gradient until the
    gradient-mapping norm drops below ``tol`` or ``max_iter`` runs out
    (check ``grad_mapping_norm``).
    """
    obj = WeightedObjective(p, datasets, model)
    x0 = np.zeros(obj.dim)
    method = "projected_gradient"
    if model.kind == SQUARED_ERROR:
        A = obj.gram()
        rhs = obj.X.T @ (obj.sw * obj.y)
        if np.linalg.cond(A) < 1e12:
            theta = np.linalg.solve(A, rhs)
            if np.linalg.norm(theta) <= C.radius:
                return ReferenceOptimum(theta, obj.value(theta), "normal_equations",
                                        obj.gradient_mapping_norm(theta, C))
            x0 = theta
        else:
            method = "projected_gradient_singular_fallback"
    if obj.dim <= NEWTON_MAX_DIM:
        theta = _newton_on_ball(obj, C)
        gm = obj.gradient_mapping_norm(theta, C)
        if gm < tol:
            return ReferenceOptimum(theta, obj.value(theta), "newton_ball", gm)
        x0 = theta
    theta, gm = _projected_gradient(obj, x0, C, tol, max_iter)
    return ReferenceOptimum(theta, obj.value(theta), method, gm)


class Constants(NamedTuple):
    G: float
    sigma_clients: np.ndarray
    sigma_sq: float
    lipschitz: float


def minibatch_moments(theta: np.ndarray, data: ClientDataset, model: LossModel,
                      batch_size: int) -> tuple[np.ndarray, float]:
    """Full gradient and E||g_B - grad||^2 over uniform size-b batches.

    Closed form for sampling without replacement (finite-population
    correction), so no batch enumeration is needed.
    """
    G = per_sample_gradients(theta, data, model)
    mean = G.mean(axis=0)
    n = data.n_samples
    if n == 1 or batch_size >= n:
        return mean, 0.0
    spread = float(np.mean(np.sum((G - mean) ** 2, axis=1)))
    var = (n - batch_size) / (batch_size * (n - 1)) * spread
    return mean, var


def sample_ball(rng: np.random.Generator, dim: int, radius: float, count: int) -> np.ndarray:
    """Points drawn uniformly from the d-dimensional ball."""
    v = rng.standard_normal((count, dim))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    r = radius * rng.random(count) ** (1.0 / dim)
    return v * r[:, None]


def estimate_constants(model: LossModel, datasets: Sequence[ClientDataset], C: ProjectionSet,
                       theta_samples: int, rng: np.random.Generator, batch_size: int,
                       p: MarginalWeights | None = None,
                       extra_points: Sequence[np.ndarray] = ()) -> Constants:
    """Sampled bounds on gradient norm, minibatch noise and Lipschitz constant.

    G^2 is the largest sampled E||g_B||^2, sigma_i^2 the largest sampled
    minibatch variance of client i, and the Lipschitz constant the largest
    sampled full-gradient norm. ``extra_points`` are evaluated alongside
    the random draws.
    """
    if theta_samples < 1:
        raise ValidationError("theta_samples must be >= 1")
    n = len(datasets)
    w = np.full(n, 1.0 / n) if p is None else _weights(p)
    dim = model.param_dim(datasets[0].dim)
    points = list(sample_ball(rng, dim, C.radius, theta_samples)) + [np.asarray(x, float) for x in extra_points]
    g_sq = 0.0
    lip = 0.0
    var = np.zeros(n)
    for theta in points:
        for i, ds in enumerate(datasets):
            b = min(batch_size, ds.n_samples)
            mean, v = minibatch_moments(theta, ds, model, b)
            m2 = float(mean @ mean)
            g_sq = max(g_sq, m2 + v)
            lip = max(lip, math.sqrt(m2))
            var[i] = max(var[i], v)
    sigma = np.sqrt(var)
    return Constants(math.sqrt(g_sq), sigma, float(w @ var), lip)
