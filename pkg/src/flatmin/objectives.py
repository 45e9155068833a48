"""Loss surfaces and their exact first-order oracles.

Every objective exposes a scalar loss and an analytic gradient over a flat
float64 parameter vector, optionally restricted to a minibatch of a dataset.
Analytic test functions (quadratic, rosenbrock, double_well) ignore batches;
the mlp objective evaluates an empirical mean over the selected rows.

All evaluations are pure: repeated calls with the same arguments return
bitwise-identical results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import (
    BatchSizeError,
    ConfigError,
    DegenerateDirectionError,
    DimensionError,
    NumericalError,
)

Vector = NDArray[np.float64]
Matrix = NDArray[np.float64]
IntVector = NDArray[np.int64]

# finite-difference step applied along a normalized direction
DEFAULT_FD_STEP = 1e-4


def _as_param_vector(theta: object, dim: int) -> Vector:
    arr = np.asarray(theta, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"parameter vector must be 1-D, got shape {arr.shape}")
    if arr.size != dim:
        raise DimensionError(f"parameter vector has size {arr.size}, objective needs {dim}")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Supervised rows with integer class labels and a domain tag per row."""

    inputs: Matrix
    labels: IntVector
    domain_ids: IntVector

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        domains = np.asarray(self.domain_ids, dtype=np.int64)
        if inputs.ndim != 2:
            raise DimensionError(f"inputs must be 2-D, got shape {inputs.shape}")
        if labels.ndim != 1 or domains.ndim != 1:
            raise DimensionError("labels and domain_ids must be 1-D")
        if not (inputs.shape[0] == labels.size == domains.size):
            raise DimensionError(
                f"row counts disagree: inputs {inputs.shape[0]}, labels {labels.size}, "
                f"domain_ids {domains.size}"
            )
        if not np.all(np.isfinite(inputs)):
            raise NumericalError("dataset inputs contain non-finite values")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "domain_ids", domains)

    @property
    def n(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, indices: IntVector) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.domain_ids[idx])

    def to_dict(self) -> dict:
        return {
            "inputs": self.inputs.tolist(),
            "labels": self.labels.tolist(),
            "domain_ids": self.domain_ids.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Dataset":
        missing = {"inputs", "labels", "domain_ids"} - set(doc)
        if missing:
            raise ConfigError(f"dataset document is missing keys: {sorted(missing)}")
        return cls(
            np.asarray(doc["inputs"], dtype=np.float64),
            np.asarray(doc["labels"], dtype=np.int64),
            np.asarray(doc["domain_ids"], dtype=np.int64),
        )


def load_dataset(path: str | Path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        return Dataset.from_dict(json.load(fh))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset.to_dict(), fh)
        fh.write("\n")


@dataclass(frozen=True)
class Batch:
    """Row indices into a Dataset."""

    indices: IntVector

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise DimensionError("batch indices must be 1-D")
        object.__setattr__(self, "indices", idx)

    @property
    def size(self) -> int:
        return int(self.indices.size)


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Draw ``batch_size`` distinct rows uniformly (without replacement)."""
    n = dataset.n
    if batch_size < 1 or batch_size > n:
        raise BatchSizeError(f"batch size {batch_size} outside [1, {n}]")
    return Batch(rng.choice(n, size=batch_size, replace=False).astype(np.int64))


class Objective:
    """Scalar loss with an analytic gradient over a flat parameter vector."""

    kind: str = "abstract"
    dim: int = 0
    dataset: Dataset | None = None

    def _rows(self, batch: Batch | None) -> IntVector | None:
        if self.dataset is None:
            return None
        if batch is None:
            return np.arange(self.dataset.n, dtype=np.int64)
        idx = batch.indices
        if idx.size == 0:
            raise BatchSizeError("batch is empty")
        if idx.min() < 0 or idx.max() >= self.dataset.n:
            raise DimensionError("batch indices outside dataset")
        return idx

    def _loss(self, theta: Vector, rows: IntVector | None) -> float:
        raise NotImplementedError

    def _grad(self, theta: Vector, rows: IntVector | None) -> Vector:
        raise NotImplementedError


def eval_loss(obj: Objective, theta: Vector, batch: Batch | None = None) -> float:
    """Loss at ``theta`` over ``batch`` (or the full dataset / analytic surface)."""
    theta = _as_param_vector(theta, obj.dim)
    value = float(obj._loss(theta, obj._rows(batch)))
    if not np.isfinite(value):
        raise NumericalError(f"loss is non-finite ({value})")
    return value


def eval_grad(obj: Objective, theta: Vector, batch: Batch | None = None) -> Vector:
    """Analytic gradient at ``theta`` over the same rows ``eval_loss`` would use."""
    theta = _as_param_vector(theta, obj.dim)
    grad = np.asarray(obj._grad(theta, obj._rows(batch)), dtype=np.float64)
    if grad.shape != (obj.dim,):
        raise DimensionError(f"gradient shape {grad.shape} != ({obj.dim},)")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("gradient contains non-finite values")
    return grad


def hvp_fd(
    obj: Objective,
    theta: Vector,
    v: Vector,
    batch: Batch | None = None,
    h: float = DEFAULT_FD_STEP,
) -> Vector:
    """Hessian-vector product H(theta) @ v by forward-differencing the gradient.

    The probe step ``h`` is applied along v normalized to unit length, then the
    difference quotient is rescaled by ||v||, so accuracy does not depend on the
    magnitude of v.
    """
    theta = _as_param_vector(theta, obj.dim)
    v = _as_param_vector(v, obj.dim)
    if h <= 0.0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateDirectionError("hvp direction has zero norm")
    unit = v / norm
    g1 = eval_grad(obj, theta + h * unit, batch)
    g0 = eval_grad(obj, theta, batch)
    return (g1 - g0) * (norm / h)


class QuadraticObjective(Objective):
    """0.5 * theta^T H theta for a symmetric H (dense matrix or diagonal)."""

    kind = "quadratic"

    def __init__(self, curvature: Matrix | Vector):
        arr = np.asarray(curvature, dtype=np.float64)
        if arr.ndim == 1:
            if arr.size == 0:
                raise ConfigError("quadratic curvature is empty")
            self.diag: Vector | None = arr
            self.matrix: Matrix | None = None
            self.dim = int(arr.size)
        elif arr.ndim == 2:
            if arr.shape[0] != arr.shape[1]:
                raise DimensionError(f"curvature matrix must be square, got {arr.shape}")
            scale = max(1.0, float(np.abs(arr).max()))
            if float(np.abs(arr - arr.T).max()) > 1e-12 * scale:
                raise ConfigError("curvature matrix must be symmetric")
            self.diag = None
            self.matrix = arr
            self.dim = int(arr.shape[0])
        else:
            raise DimensionError("curvature must be a vector or a square matrix")

    def hessian(self) -> Matrix:
        if self.diag is not None:
            return np.diag(self.diag)
        assert self.matrix is not None
        return self.matrix

    def _loss(self, theta: Vector, rows: IntVector | None) -> float:
        if self.diag is not None:
            return 0.5 * float(self.diag @ (theta * theta))
        return 0.5 * float(theta @ (self.matrix @ theta))

    def _grad(self, theta: Vector, rows: IntVector | None) -> Vector:
        if self.diag is not None:
            return self.diag * theta
        return self.matrix @ theta


class RosenbrockObjective(Objective):
    """Extended Rosenbrock valley in d >= 2 dimensions (minimum at all-ones)."""

    kind = "rosenbrock"

    def __init__(self, dim: int):
        if dim < 2:
            raise ConfigError(f"rosenbrock needs dim >= 2, got {dim}")
        self.dim = int(dim)

    def _loss(self, theta: Vector, rows: IntVector | None) -> float:
        x, y = theta[:-1], theta[1:]
        return float(np.sum(100.0 * (y - x * x) ** 2 + (1.0 - x) ** 2))

    def _grad(self, theta: Vector, rows: IntVector | None) -> Vector:
        g = np.zeros_like(theta)
        x, y = theta[:-1], theta[1:]
        g[:-1] += -400.0 * x * (y - x * x) - 2.0 * (1.0 - x)
        g[1:] += 200.0 * (y - x * x)
        return g


class DoubleWellObjective(Objective):
    """1-D pointwise minimum of two parabolic basins with separate curvatures.

    The loss is min over basins of offset_i + 0.5 * curvature_i * (x - center_i)^2.
    The gradient follows the active basin; at a crossing the first basin wins.
    """

    kind = "double_well"

    def __init__(
        self,
        centers: tuple[float, float] = (-1.0, 1.0),
        curvatures: tuple[float, float] = (8.0, 0.5),
        offsets: tuple[float, float] = (0.0, 0.0),
    ):
        if len(centers) != 2 or len(curvatures) != 2 or len(offsets) != 2:
            raise ConfigError("double_well takes exactly two basins")
        if min(curvatures) <= 0.0:
            raise ConfigError("basin curvatures must be positive")
        self.centers = (float(centers[0]), float(centers[1]))
        self.curvatures = (float(curvatures[0]), float(curvatures[1]))
        self.offsets = (float(offsets[0]), float(offsets[1]))
        self.dim = 1

    def _basin_values(self, x: float) -> tuple[float, float]:
        c, k, b = self.centers, self.curvatures, self.offsets
        return (
            b[0] + 0.5 * k[0] * (x - c[0]) ** 2,
            b[1] + 0.5 * k[1] * (x - c[1]) ** 2,
        )

    def crossing_points(self) -> Vector:
        """Solutions of basin0(x) == basin1(x); useful for avoiding the kink."""
        c, k, b = self.centers, self.curvatures, self.offsets
        # 0.5*(k0 - k1)x^2 - (k0 c0 - k1 c1)x + (b0 - b1 + 0.5 k0 c0^2 - 0.5 k1 c1^2) = 0
        a2 = 0.5 * (k[0] - k[1])
        a1 = -(k[0] * c[0] - k[1] * c[1])
        a0 = b[0] - b[1] + 0.5 * k[0] * c[0] ** 2 - 0.5 * k[1] * c[1] ** 2
        if a2 == 0.0:
            if a1 == 0.0:
                return np.array([], dtype=np.float64)
            return np.array([-a0 / a1], dtype=np.float64)
        disc = a1 * a1 - 4.0 * a2 * a0
        if disc < 0.0:
            return np.array([], dtype=np.float64)
        root = np.sqrt(disc)
        return np.sort(np.array([(-a1 - root) / (2 * a2), (-a1 + root) / (2 * a2)]))

    def _loss(self, theta: Vector, rows: IntVector | None) -> float:
        v0, v1 = self._basin_values(float(theta[0]))
        return v0 if v0 <= v1 else v1

    def _grad(self, theta: Vector, rows: IntVector | None) -> Vector:
        x = float(theta[0])
        v0, v1 = self._basin_values(x)
        i = 0 if v0 <= v1 else 1
        return np.array([self.curvatures[i] * (x - self.centers[i])], dtype=np.float64)


class MLPObjective(Objective):
    """Fully-connected tanh network with mean softmax cross-entropy loss.

    ``layer_sizes`` lists (input_dim, hidden..., num_classes); parameters are a
    flat vector packing each layer's weight matrix then bias. The gradient is
    exact reverse-mode differentiation of the batch-mean loss.
    """

    kind = "mlp"

    def __init__(self, layer_sizes: tuple[int, ...], dataset: Dataset):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2:
            raise ConfigError("mlp needs at least input and output layer sizes")
        if min(sizes) < 1:
            raise ConfigError(f"layer sizes must be positive, got {sizes}")
        if dataset.feature_dim != sizes[0]:
            raise DimensionError(
                f"dataset feature dim {dataset.feature_dim} != input layer {sizes[0]}"
            )
        if dataset.labels.min() < 0 or dataset.labels.max() >= sizes[-1]:
            raise ConfigError("dataset labels outside [0, num_classes)")
        self.layer_sizes = sizes
        self.dataset = dataset
        self.dim = sum((fi + 1) * fo for fi, fo in zip(sizes[:-1], sizes[1:]))

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def init_params(self, rng: np.random.Generator) -> Vector:
        """Symmetric uniform weight init with limit sqrt(6/(fan_in+fan_out)); zero biases."""
        chunks = []
        for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fi + fo))
            chunks.append(rng.uniform(-limit, limit, size=fi * fo))
            chunks.append(np.zeros(fo))
        return np.concatenate(chunks)

    def _unpack(self, theta: Vector) -> list[tuple[Matrix, Vector]]:
        layers = []
        off = 0
        for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = theta[off : off + fi * fo].reshape(fi, fo)
            off += fi * fo
            b = theta[off : off + fo]
            off += fo
            layers.append((w, b))
        return layers

    def logits(self, theta: Vector, inputs: Matrix) -> Matrix:
        theta = _as_param_vector(theta, self.dim)
        a = np.asarray(inputs, dtype=np.float64)
        layers = self._unpack(theta)
        for w, b in layers[:-1]:
            a = np.tanh(a @ w + b)
        w, b = layers[-1]
        return a @ w + b

    def _forward(self, theta: Vector, rows: IntVector) -> tuple[list[Matrix], Matrix]:
        layers = self._unpack(theta)
        acts = [self.dataset.inputs[rows]]
        for w, b in layers[:-1]:
            acts.append(np.tanh(acts[-1] @ w + b))
        w, b = layers[-1]
        return acts, acts[-1] @ w + b

    def _loss(self, theta: Vector, rows: IntVector | None) -> float:
        assert rows is not None
        _, logits = self._forward(theta, rows)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        picked = shifted[np.arange(rows.size), self.dataset.labels[rows]]
        return float(np.mean(logz - picked))

    def _grad(self, theta: Vector, rows: IntVector | None) -> Vector:
        assert rows is not None
        layers = self._unpack(theta)
        acts, logits = self._forward(theta, rows)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        probs = expz / expz.sum(axis=1, keepdims=True)
        delta = probs
        delta[np.arange(rows.size), self.dataset.labels[rows]] -= 1.0
        delta /= rows.size
        grads: list[Vector] = []
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            gw = acts[li].T @ delta
            gb = delta.sum(axis=0)
            grads.append(gb)
            grads.append(gw.ravel())
            if li > 0:
                delta = (delta @ w.T) * (1.0 - acts[li] * acts[li])
        return np.concatenate(grads[::-1])


def random_spd_matrix(
    dim: int,
    rng: np.random.Generator,
    eig_low: float = 0.5,
    eig_high: float = 10.0,
    min_top_gap: float = 1.0,
) -> Matrix:
    """Random SPD matrix with eigenvalues uniform in [eig_low, eig_high].

    ``min_top_gap`` >= 1 enforces lambda_1 >= min_top_gap * lambda_2 so that
    iterative flatness estimators have a usable spectral gap.
    """
    if dim < 1:
        raise ConfigError(f"dimension must be positive, got {dim}")
    if not (0.0 < eig_low <= eig_high):
        raise ConfigError("need 0 < eig_low <= eig_high")
    eigs = np.sort(rng.uniform(eig_low, eig_high, size=dim))[::-1]
    if dim > 1 and eigs[0] < min_top_gap * eigs[1]:
        eigs[0] = min_top_gap * eigs[1]
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    mat = (q * eigs) @ q.T
    return (mat + mat.T) / 2.0


def make_objective(spec: dict, dataset: Dataset | None = None) -> Objective:
    """Build an objective from a plain config dict (see the CLI docs)."""
    if "kind" not in spec:
        raise ConfigError("objective config needs a 'kind'")
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "quadratic":
        unknown = set(spec) - {"diag", "matrix", "random_spd"}
        if unknown:
            raise ConfigError(f"unknown quadratic keys: {sorted(unknown)}")
        given = [k for k in ("diag", "matrix", "random_spd") if k in spec]
        if len(given) != 1:
            raise ConfigError("quadratic needs exactly one of diag | matrix | random_spd")
        if "diag" in spec:
            return QuadraticObjective(np.asarray(spec["diag"], dtype=np.float64))
        if "matrix" in spec:
            return QuadraticObjective(np.asarray(spec["matrix"], dtype=np.float64))
        rs = dict(spec["random_spd"])
        unknown = set(rs) - {"dim", "seed", "eig_low", "eig_high", "min_top_gap"}
        if unknown:
            raise ConfigError(f"unknown random_spd keys: {sorted(unknown)}")
        rng = np.random.default_rng(int(rs.get("seed", 0)))
        return QuadraticObjective(
            random_spd_matrix(
                int(rs["dim"]),
                rng,
                eig_low=float(rs.get("eig_low", 0.5)),
                eig_high=float(rs.get("eig_high", 10.0)),
                min_top_gap=float(rs.get("min_top_gap", 1.0)),
            )
        )
    if kind == "rosenbrock":
        unknown = set(spec) - {"dim"}
        if unknown:
            raise ConfigError(f"unknown rosenbrock keys: {sorted(unknown)}")
        return RosenbrockObjective(int(spec.get("dim", 2)))
    if kind == "double_well":
        unknown = set(spec) - {"centers", "curvatures", "offsets"}
        if unknown:
            raise ConfigError(f"unknown double_well keys: {sorted(unknown)}")
        return DoubleWellObjective(
            centers=tuple(spec.get("centers", (-1.0, 1.0))),
            curvatures=tuple(spec.get("curvatures", (8.0, 0.5))),
            offsets=tuple(spec.get("offsets", (0.0, 0.0))),
        )
    if kind == "mlp":
        unknown = set(spec) - {"layer_sizes", "dataset"}
        if unknown:
            raise ConfigError(f"unknown mlp keys: {sorted(unknown)}")
        if dataset is None:
            if "dataset" not in spec:
                raise ConfigError("mlp objective needs a dataset")
            dataset = load_dataset(spec["dataset"])
        if "layer_sizes" not in spec:
            raise ConfigError("mlp objective needs layer_sizes")
        return MLPObjective(tuple(spec["layer_sizes"]), dataset)
    raise ConfigError(f"unknown objective kind '{kind}'")
