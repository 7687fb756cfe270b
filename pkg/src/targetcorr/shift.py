"""Effective targets: the labels an offline learner would need to reproduce an
online learner, plus their one-sample update rule."""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _linalg
from .errors import DimensionError, TargetCorrError
from .kernels import gram
from .regression import minibatch_coefficients, online_coefficients

PROVENANCES = ("true", "effective", "corrected", "iterative")
_CSV_PREFIX = {"true": "y_true", "effective": "y_eff", "corrected": "y_corr", "iterative": "y_iter"}


@dataclass(frozen=True, eq=False)
class TargetMatrix:
    values: np.ndarray
    provenance: str = "true"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise TargetCorrError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "values", np.atleast_2d(self.values))

    @property
    def n(self):
        return self.values.shape[1]

    def check_pairs(self, n):
        if self.n != n:
            raise DimensionError(f"target matrix has {self.n} columns, dataset has {n}", dimension="n")


def _check_meta(targets, eta, gamma):
    for key, val in (("eta", eta), ("gamma", gamma)):
        if key in targets.meta and targets.meta[key] != val:
            raise TargetCorrError(
                f"targets were built with {key}={targets.meta[key]}, update called with {key}={val}"
            )


def effective_targets(kernel, X, Y, eta, gamma, b=1):
    """``Y^e = Y (1/eta I + K^U)^{-1} (gamma I + K)``.

    ``gamma`` is the ridge of the offline baseline being mimicked; the online
    side is unregularized.  ``b > 1`` uses the mini-batch learner (``K^{bU}``).
    """
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    if X.shape[1] != Y.shape[1]:
        raise DimensionError(f"X has {X.shape[1]} columns but Y has {Y.shape[1]}", dimension="n")
    K = gram(kernel, X)
    A = online_coefficients(K, Y, eta, 0.0) if b == 1 else minibatch_coefficients(K, Y, eta, b)
    Ye = A @ (gamma * np.eye(K.shape[0]) + K)
    return TargetMatrix(Ye, "effective", {"eta": eta, "gamma": gamma})


def online_residual(kernel, X_n, Y_n, eta, x_new, y_new):
    """``e = f_on(x_new; X_n, Y_n) - y_new`` for the unregularized online learner."""
    y_new = np.asarray(y_new, dtype=float).reshape(-1)
    X_n = np.atleast_2d(X_n)
    if X_n.shape[1] == 0:
        return -y_new
    A = online_coefficients(gram(kernel, X_n), np.atleast_2d(Y_n), eta, 0.0)
    f = A @ gram(kernel, X_n, np.asarray(x_new).reshape(-1, 1))
    return f[:, 0] - y_new


def _shift_update(Ye, k_row, k_new, y_new, e_new, eta, gamma):
    old = Ye - eta * np.outer(e_new, k_row)
    new = y_new - (eta * (gamma + k_new) - 1.0) * e_new
    return np.concatenate([old, new[:, None]], axis=1)


def shift_one_step(Ye_n, kernel, X_n, x_new, y_new, e_new, eta, gamma):
    """Effective targets after one more sample, from those after ``n`` samples."""
    _check_meta(Ye_n, eta, gamma)
    X_n = np.atleast_2d(X_n)
    Ye_n.check_pairs(X_n.shape[1])
    x_new = np.asarray(x_new, dtype=float).reshape(-1, 1)
    y_new = np.asarray(y_new, dtype=float).reshape(-1)
    e_new = np.asarray(e_new, dtype=float).reshape(-1)
    k_new = float(gram(kernel, x_new)[0, 0])
    k_row = gram(kernel, x_new, X_n)[0] if X_n.shape[1] else np.zeros(0)
    values = _shift_update(Ye_n.values.reshape(len(y_new), -1), k_row, k_new, y_new, e_new, eta, gamma)
    return TargetMatrix(values, "effective", {"eta": eta, "gamma": gamma})


class ShiftTracker:
    """Streams samples and keeps the effective targets current.

    The online learner is kept in dual form; its coefficients only gain one
    column per sample, so each update costs O(n) kernel evaluations.
    """

    def __init__(self, kernel, eta, gamma, d_y, d_x):
        self.kernel = kernel
        self.eta = eta
        self.gamma = gamma
        self.X = np.zeros((d_x, 0))
        self.alpha = np.zeros((d_y, 0))
        self.Ye = np.zeros((d_y, 0))

    def push(self, x, y):
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        y = np.asarray(y, dtype=float).reshape(-1)
        k_row = gram(self.kernel, x, self.X)[0] if self.X.shape[1] else np.zeros(0)
        k_new = float(gram(self.kernel, x)[0, 0])
        e = self.alpha @ k_row - y
        self.Ye = _shift_update(self.Ye, k_row, k_new, y, e, self.eta, self.gamma)
        self.alpha = np.concatenate([self.alpha, (-self.eta * e)[:, None]], axis=1)
        self.X = np.concatenate([self.X, x], axis=1)
        return e

    @property
    def targets(self):
        return TargetMatrix(self.Ye.copy(), "effective", {"eta": self.eta, "gamma": self.gamma})


def export_targets(path, Y_true, *targets):
    """CSV with columns ``index, y_true_*, <prefix>_*`` for each extra target matrix."""
    Y_true = np.atleast_2d(Y_true)
    blocks = [("y_true", Y_true)]
    for t in targets:
        t.check_pairs(Y_true.shape[1])
        blocks.append((_CSV_PREFIX[t.provenance], _linalg.to_float(t.values)))
    header = ["index"] + [f"{p}_{d}" for p, M in blocks for d in range(M.shape[0])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(Y_true.shape[1]):
            w.writerow([i] + [repr(float(M[d, i])) for _, M in blocks for d in range(M.shape[0])])
