"""Federated datasets: synthetic regression, MNIST IDX ingestion, partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConsistencyError, FormatError, TruncatedFileError, ValidationError
from .optimization import ClientDataset, LossModel

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

IID_SHARDS = "iid"
LABEL_SORTED = "label_sorted"


@dataclass(frozen=True)
class FederationData:
    datasets: tuple[ClientDataset, ...]
    model: LossModel
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        if not self.datasets:
            raise ValidationError("a federation needs at least one client")
        dims = {d.dim for d in self.datasets}
        if len(dims) != 1:
            raise ValidationError(f"inconsistent feature dimensions {sorted(dims)}")

    @property
    def n_clients(self) -> int:
        return len(self.datasets)

    @property
    def feature_dim(self) -> int:
        return self.datasets[0].dim

    @property
    def param_dim(self) -> int:
        return self.model.param_dim(self.feature_dim)

    def describe(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "client_sizes": [d.n_samples for d in self.datasets],
            "feature_dim": self.feature_dim,
            "model": self.model.to_json(),
            **self.meta,
        }


@dataclass(frozen=True)
class SynthRegressionSpec:
    n_clients: int = 100
    samples_per_client: int = 50
    dim: int = 20
    noise_std: float = 0.1
    heterogeneity: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_clients", "samples_per_client", "dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("noise_std", "heterogeneity"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0")


def generate_regression(spec: SynthRegressionSpec) -> FederationData:
    """Linear-Gaussian clients sharing a perturbed ground-truth parameter.

    The ground truth is returned in ``meta['theta_true']``.
    """
    rng = np.random.default_rng(spec.seed)
    theta_true = rng.standard_normal(spec.dim)
    datasets = []
    for _ in range(spec.n_clients):
        theta_i = theta_true + spec.heterogeneity * rng.standard_normal(spec.dim)
        X = rng.standard_normal((spec.samples_per_client, spec.dim))
        y = X @ theta_i + spec.noise_std * rng.standard_normal(spec.samples_per_client)
        datasets.append(ClientDataset(X, y))
    meta = {"generator": "synth_regression", **asdict(spec), "theta_true": theta_true.tolist()}
    return FederationData(tuple(datasets), LossModel.squared_error(), meta)


def _open(path):
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return path.open("rb")


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: expected {n} bytes, got {len(buf)}")
    return buf


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes (plain or gzipped)."""
    with _open(path) as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, path))
        if magic != expected_magic:
            raise FormatError(
                f"{path}: magic {magic} (0x{magic:08X}), expected {expected_magic} "
                f"(0x{expected_magic:08X})"
            )
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, path))
        count = int(np.prod(dims))
        payload = _read_exact(fh, count, path)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (magic 0x0000080<ndim>)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{arr.ndim}I", magic, *arr.shape))
        fh.write(arr.tobytes())


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as an (n, rows*cols) matrix scaled to [0, 1], labels as int64."""
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    X = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return X, labels.astype(np.int64)


def _split_sizes(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def partition(features: np.ndarray, labels: np.ndarray, n_clients: int,
              strategy: str = IID_SHARDS, seed: int = 0,
              model: LossModel | None = None) -> FederationData:
    """Split samples over clients in near-equal contiguous shards.

    ``iid`` shuffles first; ``label_sorted`` stable-sorts by label, so each
    client sees few classes.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    n = features.shape[0]
    if labels.shape[0] != n:
        raise ConsistencyError(f"{n} feature rows but {labels.shape[0]} labels")
    if n_clients < 1:
        raise ValidationError("n_clients must be >= 1")
    if n < n_clients:
        raise CapacityError(f"{n} samples cannot cover {n_clients} clients")
    if strategy == IID_SHARDS:
        order = np.random.default_rng(seed).permutation(n)
    elif strategy == LABEL_SORTED:
        order = np.argsort(labels, kind="stable")
    else:
        raise ValidationError(f"unknown partition strategy {strategy!r}")
    if model is None:
        model = LossModel.logistic(max(2, int(labels.max()) + 1))
    datasets = []
    start = 0
    for size in _split_sizes(n, n_clients):
        idx = order[start:start + size]
        datasets.append(ClientDataset(features[idx], labels[idx]))
        start += size
    meta = {"generator": "partition", "strategy": strategy, "seed": seed, "n_samples": n}
    return FederationData(tuple(datasets), model, meta)


def federation_from_arrays(arrays: Sequence[tuple[np.ndarray, np.ndarray]],
                           model: LossModel) -> FederationData:
    return FederationData(tuple(ClientDataset(X, y) for X, y in arrays), model, {})
