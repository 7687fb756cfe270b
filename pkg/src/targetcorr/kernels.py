"""Kernels, Gram assembly, directional masks and the decay diagonal.

Inputs follow the column convention used throughout the package: a data
matrix ``X`` is ``d_x x n`` with one sample per column.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import cdist

from . import _linalg
from .errors import DimensionError, ExplicitFeaturesRequired, TargetCorrError

PSD_RTOL = 1e-8


def _as_columns(X, name="X"):
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionError(f"{name} must be a d_x x n matrix, got shape {X.shape}", dimension="d_x")
    return X


class Kernel:
    """Common surface of every kernel kind."""

    d_x: Optional[int] = None
    has_features = False

    def features(self, X):
        raise ExplicitFeaturesRequired(f"{type(self).__name__} has no explicit feature map")

    def _check(self, X, name):
        X = _as_columns(X, name)
        if self.d_x is not None and X.shape[0] != self.d_x:
            raise DimensionError(
                f"{name} has input dimension d_x={X.shape[0]}, kernel expects d_x={self.d_x}",
                dimension="d_x",
            )
        return X

    def gram(self, X, X2):
        raise NotImplementedError

    def descriptor(self):
        raise NotImplementedError


@dataclass(frozen=True)
class RBF(Kernel):
    """``k(x, x') = exp(-|x - x'|^2 / bandwidth)``."""

    bandwidth: float = 0.1
    d_x: Optional[int] = None

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise TargetCorrError(f"RBF bandwidth must be positive, got {self.bandwidth}")

    def gram(self, X, X2):
        X, X2 = self._check(X, "X"), self._check(X2, "X'")
        if X.shape[0] != X2.shape[0]:
            raise DimensionError(f"d_x mismatch: {X.shape[0]} vs {X2.shape[0]}", dimension="d_x")
        return np.exp(-cdist(X.T, X2.T, "sqeuclidean") / self.bandwidth)

    def descriptor(self):
        return {"kind": "rbf", "bandwidth": self.bandwidth, "d_x": self.d_x}


@dataclass(frozen=True, eq=False)
class RandomFeatureTanh(Kernel):
    """``k(x, x') = tanh(J x)^T tanh(J x')`` with a fixed projection ``J``."""

    J: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)))
    has_features = True

    @property
    def d_x(self):
        return self.J.shape[1]

    def features(self, X):
        return np.tanh(self.J @ self._check(X, "X"))

    def gram(self, X, X2):
        return self.features(X).T @ self.features(X2)

    def descriptor(self):
        return {"kind": "random_feature_tanh", "J": self.J.tolist()}


@dataclass(frozen=True, eq=False)
class ExplicitFeature(Kernel):
    """Kernel given by an explicit feature map ``phi: d_x x n -> d_phi x n``."""

    feature_map: Callable = None
    d_x: Optional[int] = None
    name: str = "explicit"
    has_features = True

    def features(self, X):
        return self.feature_map(self._check(X, "X"))

    def gram(self, X, X2):
        return self.features(X).T @ self.features(X2)

    def descriptor(self):
        return {"kind": "explicit", "name": self.name, "d_x": self.d_x}


def linear_kernel(d_x=None):
    return ExplicitFeature(lambda X: X, d_x=d_x, name="linear")


@dataclass(frozen=True, eq=False)
class ExtendedFeature(ExplicitFeature):
    """Explicit features lifted to mpfr, with features and Grams memoized.

    Object-array products are slow, so repeated Grams over the same inputs at
    the same working precision are computed once.
    """

    _cache: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def _key(*arrays):
        return (_linalg.working_precision(),) + tuple((a.shape, a.tobytes()) for a in arrays)

    def features(self, X):
        X = np.asarray(X, dtype=float)
        key = ("phi",) + self._key(X)
        if key not in self._cache:
            self._cache[key] = super().features(X)
        return self._cache[key]

    def gram(self, X, X2):
        X, X2 = np.asarray(X, dtype=float), np.asarray(X2, dtype=float)
        key = ("gram",) + self._key(X, X2)
        if key not in self._cache:
            self._cache[key] = self.features(X).T @ self.features(X2)
        return self._cache[key]


def extended_features(kernel):
    """Wrap an explicit-feature kernel so its features come out as mpfr arrays."""
    if not kernel.has_features:
        raise ExplicitFeaturesRequired("extended precision needs explicit features")
    return ExtendedFeature(
        lambda X: _linalg.extended(_linalg.to_float(kernel.features(X))),
        d_x=kernel.d_x,
        name=f"extended({getattr(kernel, 'name', type(kernel).__name__)})",
    )


@dataclass(frozen=True, eq=False)
class Precomputed(Kernel):
    """A stored Gram matrix addressed by sample index.

    Inputs are ``1 x n`` integer index rows into the stored matrix, so only
    stored samples can be evaluated; there is no cross-evaluation at unseen
    points.
    """

    K: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    d_x = 1

    def _index(self, X, name):
        X = _as_columns(X, name)
        if X.shape[0] != 1:
            raise DimensionError(f"{name} must be a 1 x n index row for a precomputed kernel", dimension="d_x")
        idx = X[0]
        if idx.size and (not np.all(np.equal(np.mod(idx, 1), 0)) or idx.min() < 0 or idx.max() >= self.K.shape[0]):
            raise TargetCorrError(
                "precomputed kernel cannot evaluate points outside its stored Gram "
                f"(valid indices 0..{self.K.shape[0] - 1})"
            )
        return idx.astype(int)

    def gram(self, X, X2):
        return self.K[np.ix_(self._index(X, "X"), self._index(X2, "X'"))]

    def descriptor(self):
        return {"kind": "precomputed", "n": int(self.K.shape[0])}


def indices(n, start=0):
    """Index row addressing samples ``start .. start+n-1`` of a Precomputed kernel."""
    return np.arange(start, start + n)[None, :]


def eval_kernel(kernel, x, x2):
    x = np.asarray(x)
    x2 = np.asarray(x2)
    for name, v in (("x", x), ("x'", x2)):
        if v.ndim != 1:
            raise DimensionError(f"{name} must be a vector, got shape {v.shape}", dimension="d_x")
    if x.shape != x2.shape:
        raise DimensionError(f"d_x mismatch: x has {x.shape[0]}, x' has {x2.shape[0]}", dimension="d_x")
    return float(_linalg.to_float(gram(kernel, x[:, None], x2[:, None]))[0, 0])


def gram(kernel, X, X2=None):
    """Gram matrix ``K[i, j] = k(X[:, i], X2[:, j])``; ``X2`` defaults to ``X``."""
    X = _as_columns(X, "X")
    X2 = X if X2 is None else _as_columns(X2, "X'")
    if X.shape[1] < 1 or X2.shape[1] < 1:
        raise DimensionError("Gram assembly needs at least one column on each side", dimension="n")
    return kernel.gram(X, X2)


def block_ids(n, b, offset=0):
    return (offset + np.arange(n)) // b


def _block_upper(K, b, offset=0):
    return mask_by_ids(K, block_ids(K.shape[0], b, offset))


def mask_by_ids(K, ids):
    """Keep ``K[i, j]`` iff ``ids[i] < ids[j]`` (ids label SGD batches in order)."""
    ids = np.asarray(ids)
    keep = ids[:, None] < ids[None, :]
    if K.dtype == object:
        out = np.zeros(K.shape, dtype=object)
        out[keep] = K[keep]
        return out
    return np.where(keep, K, 0.0)


def directional_mask(K, b=1):
    """Block-strict-upper part of ``K``: entries kept iff block(i) < block(j).

    ``b=1`` gives the strictly upper-triangular ``K^U``.  A trailing partial
    block is treated as one smaller block.
    """
    K = np.asarray(K)
    n = K.shape[0]
    if K.ndim != 2 or K.shape[1] != n:
        raise DimensionError(f"K must be square, got {K.shape}", dimension="n")
    if b < 1 or b > max(n, 1):
        raise TargetCorrError(f"block size b={b} out of range [1, {n}]")
    return _block_upper(K, int(b))


def restricted_mask(K_block, b, offset):
    """Directional mask of a diagonal sub-block that starts at global position ``offset``."""
    return _block_upper(np.asarray(K_block), int(b), offset)


@dataclass(frozen=True)
class DecayDiagonal:
    n: int
    eta: float
    gamma: float
    diag: np.ndarray


def decay_diag(n, eta, gamma):
    """Entries ``(1 - eta*gamma)^(n - i)`` for ``i = 1..n``."""
    if n < 1:
        raise TargetCorrError(f"decay diagonal needs n >= 1, got {n}")
    base = 1 - eta * gamma
    powers = np.arange(n - 1, -1, -1)
    if isinstance(base, float):
        diag = np.power(base, powers)
    else:
        diag = np.array([base ** int(p) for p in powers], dtype=object)
    return DecayDiagonal(n, eta, gamma, diag)


@dataclass(frozen=True)
class GramBundle:
    K: np.ndarray
    block_size: int
    K_directional: np.ndarray

    @classmethod
    def build(cls, kernel, X, block_size=1):
        K = gram(kernel, X)
        return cls(K, block_size, directional_mask(K, block_size))


def psd_tolerance(K):
    return PSD_RTOL * float(np.max(np.abs(K))) if K.size else 0.0


def is_psd(K):
    K = _linalg.to_float(K)
    if not np.allclose(K, K.T, rtol=0, atol=psd_tolerance(K)):
        return False
    return bool(np.linalg.eigvalsh(0.5 * (K + K.T)).min() >= -psd_tolerance(K))


def save_matrix(path, M):
    """Write a dense matrix: ``.npy`` binary, otherwise CSV with an ``n,m`` header row."""
    path = str(path)
    M = np.atleast_2d(_linalg.to_float(M))
    if path.endswith(".npy"):
        np.save(path, M)
        return
    with open(path, "w", newline="") as fh:
        fh.write(f"{M.shape[0]},{M.shape[1]}\n")
        for row in M:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_matrix(path):
    path = str(path)
    if path.endswith(".npy"):
        return np.load(path)
    with open(path) as fh:
        n, m = (int(v) for v in fh.readline().split(","))
        data = np.loadtxt(fh, delimiter=",", ndmin=2) if n else np.zeros((0, m))
    return data.reshape(n, m)


def kernel_from_descriptor(desc):
    kind = desc["kind"]
    if kind == "rbf":
        return RBF(float(desc.get("bandwidth", 0.1)), desc.get("d_x"))
    if kind == "random_feature_tanh":
        return RandomFeatureTanh(np.asarray(desc["J"], dtype=float))
    if kind == "explicit" and desc.get("name") == "linear":
        return linear_kernel(desc.get("d_x"))
    raise TargetCorrError(f"cannot rebuild kernel of kind {kind!r} from a descriptor")
