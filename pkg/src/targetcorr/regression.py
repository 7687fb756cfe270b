"""Offline kernel ridge regression, online/mini-batch SGD and their closed forms.

Predictors are stored in dual form, ``f(x*) = A k(X, x*)`` with a ``d_y x n``
coefficient matrix ``A``:

* offline:        ``A = Y (gamma I + K)^{-1}``
* online:         ``A = Y D_n (1/eta I + K^U / (1 - eta gamma))^{-1}``
* mini-batch:     ``A = Y (1/eta I + K^{bU})^{-1}``

The online coefficients of the first ``t`` samples do not change when more
samples arrive (the system is upper triangular), so ``A[:, :t]`` is exactly
the predictor after ``t`` updates.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _linalg
from .errors import DegenerateDecayError, DimensionError, ExplicitFeaturesRequired, TargetCorrError
from .kernels import Kernel, decay_diag, directional_mask, gram


@dataclass(frozen=True, eq=False)
class OrderedDataset:
    """Samples in presentation order: ``X`` is ``d_x x n``, ``Y`` is ``d_y x n``."""

    X: np.ndarray
    Y: np.ndarray
    labels: Optional[np.ndarray] = None
    task_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.atleast_2d(self.X)
        Y = np.atleast_2d(self.Y)
        if X.shape[1] != Y.shape[1]:
            raise DimensionError(f"X has {X.shape[1]} columns but Y has {Y.shape[1]}", dimension="n")
        for name in ("labels", "task_ids"):
            v = getattr(self, name)
            if v is not None and len(v) != X.shape[1]:
                raise DimensionError(f"{name} has length {len(v)}, expected {X.shape[1]}", dimension="n")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self):
        return self.X.shape[1]

    @property
    def d_x(self):
        return self.X.shape[0]

    @property
    def d_y(self):
        return self.Y.shape[0]

    def take(self, idx):
        idx = np.asarray(idx)
        return OrderedDataset(
            self.X[:, idx],
            self.Y[:, idx],
            None if self.labels is None else self.labels[idx],
            None if self.task_ids is None else self.task_ids[idx],
        )

    def prefix(self, t):
        return self.take(np.arange(t))

    def with_targets(self, Y):
        return OrderedDataset(self.X, Y, self.labels, self.task_ids)


def repeat_epochs(dataset, epochs):
    """Multi-epoch streams are the dataset concatenated with itself."""
    return dataset.take(np.tile(np.arange(dataset.n), epochs))


@dataclass(frozen=True)
class HyperParams:
    eta: float = 0.5
    gamma: float = 1.0
    gamma_o: float = 0.0
    b: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise TargetCorrError(f"learning rate eta must be positive, got {self.eta}")
        if self.gamma < 0 or self.gamma_o < 0:
            raise TargetCorrError("gamma and gamma_o must be nonnegative")
        if int(self.b) != self.b or self.b < 1:
            raise TargetCorrError(f"block size b must be a positive integer, got {self.b}")


@dataclass
class WeightState:
    W: np.ndarray
    step: int = 0


@dataclass(eq=False)
class Predictor:
    """A fitted predictor; call it on a ``d_x x m`` matrix of test inputs."""

    form: str
    kernel: Kernel
    coef: np.ndarray
    X: Optional[np.ndarray] = None
    hyper: dict = field(default_factory=dict)

    def __call__(self, X_star):
        if self.form == "explicit_weights":
            return self.coef @ self.kernel.features(X_star)
        return self.coef @ gram(self.kernel, self.X, X_star)

    def prefix(self, t):
        """Online/mini-batch predictor after the first ``t`` samples."""
        if self.form not in ("online_closed_form", "minibatch_closed_form"):
            raise TargetCorrError(f"prefix predictors exist only for online forms, not {self.form}")
        if self.form == "online_closed_form" and self.hyper.get("gamma", 0.0) != 0.0:
            raise TargetCorrError("prefixes of a weight-decayed run need refitting (decay rescales old terms)")
        return Predictor(self.form, self.kernel, self.coef[:, :t], self.X[:, :t], dict(self.hyper))

    def descriptor(self, dataset_path=None, weights_path=None):
        out = {"form": self.form, "kernel": self.kernel.descriptor(), "hyper": dict(self.hyper)}
        if dataset_path is not None:
            out["dataset"] = str(dataset_path)
        if weights_path is not None:
            out["weights"] = str(weights_path)
        return out


def _check_xy(X, Y):
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    if X.shape[1] != Y.shape[1]:
        raise DimensionError(f"X has {X.shape[1]} columns but Y has {Y.shape[1]}", dimension="n")
    return X, Y


def offline_coefficients(K, Y, gamma):
    n = K.shape[0]
    factor = _linalg.cho_factor(gamma * np.eye(n) + K, what="gamma*I + K")
    return _linalg.cho_solve(factor, np.atleast_2d(Y).T).T


def online_coefficients(K, Y, eta, gamma=0.0):
    """Dual coefficients of the sample-by-sample SGD predictor."""
    if not eta > 0:
        raise TargetCorrError(f"learning rate eta must be positive, got {eta}")
    n = K.shape[0]
    eta_, gamma_ = _linalg.lift(eta, K), _linalg.lift(gamma, K)
    decay = 1 - eta_ * gamma_
    if decay == 0:
        raise DegenerateDecayError("degenerate decay: eta * gamma == 1 makes the closed form singular")
    KU = directional_mask(K, 1)
    if gamma_ == 0:
        T = _linalg.eye(n, K) * (1 / eta_) + KU
        YD = Y
    else:
        T = _linalg.eye(n, K) * (1 / eta_) + KU * (1 / decay)
        YD = Y * decay_diag(n, eta_, gamma_).diag[None, :]
    return _linalg.rsolve_triangular(YD, T, lower=False)


def minibatch_coefficients(K, Y, eta, b):
    if not eta > 0:
        raise TargetCorrError(f"learning rate eta must be positive, got {eta}")
    n = K.shape[0]
    T = _linalg.eye(n, K) * (1 / _linalg.lift(eta, K)) + directional_mask(K, b)
    return _linalg.rsolve_triangular(Y, T, lower=False)


def fit_offline(kernel, X, Y, gamma):
    X, Y = _check_xy(X, Y)
    coef = offline_coefficients(gram(kernel, X), Y, gamma)
    return Predictor("offline", kernel, coef, X, {"gamma": gamma})


def fit_online(kernel, X, Y, eta, gamma=0.0):
    X, Y = _check_xy(X, Y)
    coef = online_coefficients(gram(kernel, X), Y, eta, gamma)
    return Predictor("online_closed_form", kernel, coef, X, {"eta": eta, "gamma": gamma})


def fit_minibatch(kernel, X, Y, eta, b):
    X, Y = _check_xy(X, Y)
    coef = minibatch_coefficients(gram(kernel, X), Y, eta, b)
    return Predictor("minibatch_closed_form", kernel, coef, X, {"eta": eta, "b": b})


def offline_predict(kernel, X, Y, gamma, X_star):
    """``Y (gamma I + K)^{-1} k(X, X*)`` via a guarded Cholesky solve."""
    return fit_offline(kernel, X, Y, gamma)(X_star)


def online_closed_form(kernel, X, Y, eta, gamma, X_star):
    """Predictor reached by sample-by-sample SGD (weight decay ``gamma``) from W=0."""
    return fit_online(kernel, X, Y, eta, gamma)(X_star)


def minibatch_closed_form(kernel, X, Y, eta, b, X_star):
    """Predictor reached by unregularized mini-batch SGD with consecutive batches of size ``b``."""
    return fit_minibatch(kernel, X, Y, eta, b)(X_star)


@dataclass
class SgdRun:
    trajectory: list
    final: WeightState
    predictor: Predictor


def sgd_run(kernel, dataset, eta, gamma=0.0, b=1, W1=None, targets_override=None, epochs=1, record=True):
    """Plain SGD on the squared loss in explicit feature space.

    Each consecutive chunk of ``b`` samples applies
    ``W <- W - eta * ((W Phi - Y) Phi^T + gamma W)``.
    """
    if not kernel.has_features:
        raise ExplicitFeaturesRequired("explicit features required for sgd_run")
    if not eta > 0:
        raise TargetCorrError(f"learning rate eta must be positive, got {eta}")
    if b < 1:
        raise TargetCorrError(f"block size b must be >= 1, got {b}")
    Y = dataset.Y if targets_override is None else np.atleast_2d(getattr(targets_override, "values", targets_override))
    if Y.shape[1] != dataset.n:
        raise DimensionError(f"targets have {Y.shape[1]} columns, dataset has {dataset.n}", dimension="n")
    Phi = kernel.features(dataset.X)
    if W1 is None:
        W = np.zeros((Y.shape[0], Phi.shape[0]), dtype=Phi.dtype)
        if Phi.dtype == object:
            W[...] = _linalg.lift(0.0, Phi)
    else:
        W = np.array(W1, dtype=Phi.dtype)
    state = WeightState(W, 0)
    trajectory = [WeightState(W.copy(), 0)] if record else []
    for _ in range(epochs):
        for start in range(0, dataset.n, b):
            P = Phi[:, start:start + b]
            grad = (W @ P - Y[:, start:start + b]) @ P.T
            if gamma:
                grad = grad + gamma * W
            W = W - eta * grad
            state = WeightState(W, state.step + 1)
            if record:
                trajectory.append(WeightState(W.copy(), state.step))
    hyper = {"eta": eta, "gamma": gamma, "b": b, "epochs": epochs}
    return SgdRun(trajectory, state, Predictor("explicit_weights", kernel, W, None, hyper))
