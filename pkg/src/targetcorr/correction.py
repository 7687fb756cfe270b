"""Target correction: labels that make an online learner reproduce the
offline ridge predictor, exactly (whole sequence known) or chunk by chunk.

Row-vector convention: targets are ``d_y x n`` and coefficient matrices act
from the right.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _linalg
from .errors import DegenerateSchurError, DimensionError, NumericalError, TargetCorrError
from .kernels import directional_mask, gram, mask_by_ids, restricted_mask
from .regression import HyperParams, offline_coefficients, online_coefficients
from .shift import TargetMatrix, _check_meta

JITTER_COND = 1e10
JITTER_SCALE = 1e-8
SCHUR_RTOL = 1e-12


def corrected_targets(kernel, X, Y, eta, gamma, b=1):
    """``Y^c = Y (gamma I + K)^{-1} (1/eta I + K^U)``; ``b > 1`` uses ``K^{bU}``."""
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    if X.shape[1] != Y.shape[1]:
        raise DimensionError(f"X has {X.shape[1]} columns but Y has {Y.shape[1]}", dimension="n")
    if not eta > 0:
        raise TargetCorrError(f"learning rate eta must be positive, got {eta}")
    K = gram(kernel, X)
    T = np.eye(K.shape[0]) / eta + directional_mask(K, b)
    return TargetMatrix(offline_coefficients(K, Y, gamma) @ T, "corrected", {"eta": eta, "gamma": gamma})


def correction_one_step(Yc_n, kernel, X_n, Y_n, x_new, y_new, eta, gamma):
    """Corrected targets after one more sample, from those after ``n`` samples.

    Past columns move by ``rho * e_off * [k(x_new, X_n) C_K]_i`` and the new
    column is ``y_new + c_q * e_off`` where ``e_off`` is the offline
    predictor's error on the new sample.
    """
    _check_meta(Yc_n, eta, gamma)
    X_n = np.atleast_2d(X_n)
    Y_n = np.atleast_2d(Y_n)
    n = X_n.shape[1]
    Yc_n.check_pairs(n)
    x_new = np.asarray(x_new, dtype=float).reshape(-1, 1)
    y_new = np.asarray(y_new, dtype=float).reshape(-1)
    k_new = float(gram(kernel, x_new)[0, 0])
    if n == 0:
        q, e_off, shift_row = 0.0, -y_new, np.zeros(0)
    else:
        K_n = gram(kernel, X_n)
        k_col = gram(kernel, X_n, x_new)[:, 0]
        factor = _linalg.cho_factor(gamma * np.eye(n) + K_n, what="gamma*I + K")
        v = _linalg.cho_solve(factor, k_col)
        q = float(k_col @ v)
        e_off = Y_n @ v - y_new
        # k(x_new, X_n) C_K = v^T (1/eta I + K^U)
        shift_row = v / eta + v @ directional_mask(K_n, 1)
    schur = gamma + k_new - q
    if schur <= SCHUR_RTOL * max(1.0, gamma + k_new):
        raise DegenerateSchurError(f"degenerate Schur complement gamma + k - q = {schur:.3e}")
    rho = 1.0 / schur
    c_q = (gamma + k_new - 1.0 / eta) / schur
    old = Yc_n.values.reshape(len(y_new), n) + rho * np.outer(e_off, shift_row)
    values = np.concatenate([old, (y_new + c_q * e_off)[:, None]], axis=1)
    return TargetMatrix(values, "corrected", {"eta": eta, "gamma": gamma})


class CorrectionTracker:
    """Streams samples and keeps the exact corrected targets current.

    Keeps the Cholesky factor ``L`` of ``gamma I + K_n`` and extends it by one
    row per sample; the new diagonal entry squared is the Schur complement
    ``gamma + k - q``.
    """

    def __init__(self, kernel, eta, gamma, d_y, d_x):
        self.kernel, self.eta, self.gamma = kernel, eta, gamma
        self.X = np.zeros((d_x, 0))
        self.K = np.zeros((0, 0))
        self.L = np.zeros((0, 0))
        self.LY = np.zeros((0, d_y))  # L^{-1} Y^T
        self.Yc = np.zeros((d_y, 0))

    def push(self, x, y):
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        y = np.asarray(y, dtype=float).reshape(-1)
        n = self.X.shape[1]
        k_new = float(gram(self.kernel, x)[0, 0])
        k_col = gram(self.kernel, self.X, x)[:, 0] if n else np.zeros(0)
        l = _linalg.solve_triangular(self.L, k_col, lower=True)
        q = float(l @ l)
        schur = self.gamma + k_new - q
        if schur <= SCHUR_RTOL * max(1.0, self.gamma + k_new):
            raise DegenerateSchurError(f"degenerate Schur complement gamma + k - q = {schur:.3e}")
        v = _linalg.solve_triangular(self.L.T, l, lower=False)
        e_off = self.LY.T @ l - y
        shift_row = v / self.eta + v @ directional_mask(self.K, 1) if n else v
        rho = 1.0 / schur
        c_q = (self.gamma + k_new - 1.0 / self.eta) / schur
        self.Yc = np.concatenate([self.Yc + rho * np.outer(e_off, shift_row), (y + c_q * e_off)[:, None]], axis=1)
        d = np.sqrt(schur)
        self.L = np.block([[self.L, np.zeros((n, 1))], [l[None, :], np.array([[d]])]])
        self.LY = np.vstack([self.LY, ((y - l @ self.LY) / d)[None, :]])
        self.K = np.block([[self.K, k_col[:, None]], [k_col[None, :], np.array([[k_new]])]])
        self.X = np.concatenate([self.X, x], axis=1)
        return e_off

    @property
    def targets(self):
        return TargetMatrix(self.Yc.copy(), "corrected", {"eta": self.eta, "gamma": self.gamma})


@dataclass(frozen=True, eq=False)
class CorrectionStep:
    """One chunk of iterative correction.

    Holds only past data and the current chunk, so a correction step cannot
    read targets from the future.
    """

    X_past: np.ndarray
    X_new: np.ndarray
    Y_past: np.ndarray
    Y_new: np.ndarray
    Z_past: np.ndarray
    hp: HyperParams

    def __post_init__(self):
        for name in ("X_past", "X_new", "Y_past", "Y_new", "Z_past"):
            a = np.array(getattr(self, name), dtype=float, ndmin=2)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        p, b = self.X_past.shape[1], self.X_new.shape[1]
        if b < 1:
            raise DimensionError("the new block must hold at least one sample", dimension="b")
        if p and self.X_past.shape[0] != self.X_new.shape[0]:
            raise DimensionError("past and new inputs differ in d_x", dimension="d_x")
        if self.Y_new.shape[1] != b:
            raise DimensionError(f"Y_new has {self.Y_new.shape[1]} columns, X_new has {b}", dimension="b")
        for name in ("Y_past", "Z_past"):
            cols = getattr(self, name).shape[1] if getattr(self, name).size else 0
            if cols != p:
                raise DimensionError(f"{name} has {cols} columns, X_past has {p}", dimension="n")

    @property
    def n_past(self):
        return self.X_past.shape[1] if self.X_past.size else 0

    @property
    def b(self):
        return self.X_new.shape[1]

    @property
    def d_y(self):
        return self.Y_new.shape[0]

    def past_matrix(self, name):
        a = getattr(self, name)
        return a if self.n_past else np.zeros((self.d_y if name != "X_past" else self.X_new.shape[0], 0))

    @property
    def X_tot(self):
        return np.concatenate([self.past_matrix("X_past"), self.X_new], axis=1)

    @property
    def Y_tot(self):
        return np.concatenate([self.past_matrix("Y_past"), self.Y_new], axis=1)


@dataclass(frozen=True, eq=False)
class CorrectionCoefficients:
    C_on: np.ndarray
    C_off: np.ndarray
    Q: np.ndarray
    gamma_o: float = 0.0


def resolve_gamma_o(K_nn, gamma_o):
    """Return ``gamma_o``, or a small jitter when it is 0 and ``K_nn`` is near-singular."""
    if gamma_o > 0:
        return float(gamma_o)
    K_nn = _linalg.to_float(K_nn)
    if np.linalg.cond(K_nn) > JITTER_COND:
        return JITTER_SCALE * float(np.trace(K_nn)) / K_nn.shape[0]
    return 0.0


def _online_T(K_nn, eta, sgd_block, offset):
    return np.eye(K_nn.shape[0]) / eta + restricted_mask(K_nn, sgd_block, offset)


def correction_coefficients(K_nn, Q, eta, gamma, gamma_o, sgd_block=1, offset=0):
    """``C_on`` and ``C_off`` for one chunk given its Gram block and Schur complement ``Q``."""
    b = K_nn.shape[0]
    T_nn = _online_T(K_nn, eta, sgd_block, offset)
    try:
        reg = _linalg.cho_factor(gamma_o * np.eye(b) + K_nn, what="gamma_o*I + K_nn")
    except NumericalError as exc:
        raise NumericalError(
            f"{exc}; set gamma_o > 0 (e.g. 1e-8 * trace(K_nn) / b) as jitter", condition=exc.condition
        ) from exc
    M = _linalg.cho_solve(reg, T_nn)
    try:
        q_factor = _linalg.cho_factor(Q, what="Schur complement Q")
    except NumericalError as exc:
        raise DegenerateSchurError(f"past/new kernel degeneracy: {exc}", condition=exc.condition) from exc
    C_on = M - np.eye(b)
    C_off = gamma * _linalg.cho_solve(q_factor, M)
    return CorrectionCoefficients(C_on, C_off, Q, gamma_o)


def apply_correction(Y_new, f_on_new, f_off_new, coeffs):
    """``Z_new = Y + (Y - f_on) C_on + (f_off - Y) C_off``."""
    return Y_new + (Y_new - f_on_new) @ coeffs.C_on + (f_off_new - Y_new) @ coeffs.C_off


def _blocks(kernel, step):
    K_nn = gram(kernel, step.X_new)
    if step.n_past:
        K_pp = gram(kernel, step.X_past)
        K_pn = gram(kernel, step.X_past, step.X_new)
    else:
        K_pp = np.zeros((0, 0))
        K_pn = np.zeros((0, step.b))
    return K_pp, K_pn, K_nn


def iterative_correction(kernel, step, f_on_new=None, f_off_new=None, sgd_block=1):
    """Targets for the new chunk that minimize the block-wise discrepancy loss.

    ``f_on_new`` defaults to the closed-form online prediction from
    ``(X_past, Z_past)``; pass the live model's outputs instead in network
    mode.  ``f_off_new`` defaults to the offline prediction from
    ``(X_past, Y_past)``.  With ``sgd_block > 1`` the directional kernel is
    block-triangular; ``n_past`` must then be a multiple of ``sgd_block``.
    """
    hp = step.hp
    K_pp, K_pn, K_nn = _blocks(kernel, step)
    p, b = step.n_past, step.b
    if p % sgd_block:
        raise TargetCorrError(f"past length {p} is not a multiple of the SGD block {sgd_block}")
    if p:
        factor = _linalg.cho_factor(hp.gamma * np.eye(p) + K_pp, what="gamma*I + K_pp")
        S = _linalg.cho_solve(factor, K_pn)
        Q = hp.gamma * np.eye(b) + K_nn - K_pn.T @ S
        Q = 0.5 * (Q + Q.T)
        if f_off_new is None:
            f_off_new = step.Y_past @ S
        if f_on_new is None:
            T_pp = np.eye(p) / hp.eta + directional_mask(K_pp, sgd_block)
            f_on_new = _linalg.rsolve_triangular(step.Z_past, T_pp) @ K_pn
    else:
        Q = hp.gamma * np.eye(b) + K_nn
        zeros = np.zeros((step.d_y, b))
        f_off_new = zeros if f_off_new is None else f_off_new
        f_on_new = zeros if f_on_new is None else f_on_new
    gamma_o = resolve_gamma_o(K_nn, hp.gamma_o)
    coeffs = correction_coefficients(K_nn, Q, hp.eta, hp.gamma, gamma_o, sgd_block, p)
    return apply_correction(step.Y_new, np.atleast_2d(f_on_new), np.atleast_2d(f_off_new), coeffs), coeffs


def _online_T_tot(K_tot, eta, sgd_block):
    return np.eye(K_tot.shape[0]) / eta + directional_mask(K_tot, sgd_block)


def bcg_matrices(kernel, step, gamma_o=None, sgd_block=1):
    """``B``, ``C``, ``G`` read off the full-sequence matrices.

    ``[[*, B], [B^T, C]] = T^{-1} (gamma_o I + K) T^{-T}`` and
    ``[*, G] = Y (gamma I + K)^{-1} K T^{-T}`` with ``T = 1/eta I + K^U``.
    """
    hp = step.hp
    K = gram(kernel, step.X_tot)
    p = step.n_past
    if gamma_o is None:
        gamma_o = resolve_gamma_o(K[p:, p:], hp.gamma_o)
    T = _online_T_tot(K, hp.eta, sgd_block)
    left = _linalg.solve_triangular(T, gamma_o * np.eye(K.shape[0]) + K)
    S = _linalg.solve_triangular(T, left.T).T
    target = offline_coefficients(K, step.Y_tot, hp.gamma) @ K
    G_full = _linalg.solve_triangular(T, target.T).T
    return S[:p, p:], S[p:, p:], G_full[:, p:]


def iterative_correction_bcg_oracle(kernel, step, gamma_o=None, sgd_block=1):
    """Independent route to the chunk targets: ``(G - Z_past B) C^{-1}``."""
    B, C, G = bcg_matrices(kernel, step, gamma_o, sgd_block)
    rhs = G - step.past_matrix("Z_past") @ B
    try:
        return _linalg.solve(C.T, rhs.T).T
    except NumericalError as exc:
        raise NumericalError(f"C is singular: {exc}", condition=exc.condition) from exc


def eval_block_loss(kernel, Z_new, step, gamma_o=None, sgd_block=1):
    """Block-wise discrepancy between online-on-Z and offline-on-Y predictors.

    ``0.5 tr(D K D^T) + gamma_o/2 |Z M_on|_F^2`` where ``D = Z M_on - Y M_off``,
    ``M_on = (1/eta I + K^U)^{-1}`` and ``M_off = (gamma I + K)^{-1}``.  The
    first term is the squared RKHS norm of the predictor difference.
    """
    hp = step.hp
    K = gram(kernel, step.X_tot)
    p = step.n_past
    if gamma_o is None:
        gamma_o = resolve_gamma_o(K[p:, p:], hp.gamma_o)
    Z = np.concatenate([step.past_matrix("Z_past"), np.atleast_2d(Z_new)], axis=1)
    on = _linalg.rsolve_triangular(Z, _online_T_tot(K, hp.eta, sgd_block))
    D = on - offline_coefficients(K, step.Y_tot, hp.gamma)
    return 0.5 * float(np.trace(D @ K @ D.T)) + 0.5 * gamma_o * float(np.sum(on * on))


@dataclass
class ChunkRecord:
    start: int
    Z_new: np.ndarray
    coeffs: CorrectionCoefficients
    f_on: np.ndarray
    f_off: np.ndarray


class IterativeCorrector:
    """Causal chunk-by-chunk correction over a stream.

    Caches the Cholesky factor of ``gamma I + K_pp`` and extends it per chunk
    with the factor of the Schur complement ``Q``; also keeps the online
    learner's dual coefficients, which only grow as chunks arrive.  Work per
    chunk is O(n b^2 + b^3) plus the kernel evaluations.

    SGD batches of ``sgd_block`` samples restart at every chunk start, so a
    chunk never shares a batch with the past.
    """

    def __init__(self, kernel, hp, d_x, d_y, sgd_block=None, keep_records=False):
        self.kernel = kernel
        self.hp = hp
        self.sgd_block = int(hp.b if sgd_block is None else sgd_block)
        self.keep_records = keep_records
        self.records = []
        self.X = np.zeros((d_x, 0))
        self.Y = np.zeros((d_y, 0))
        self.Z = np.zeros((d_y, 0))
        self.batch_ids = np.zeros(0, dtype=int)
        self._reset_cache()

    @property
    def n(self):
        return self.X.shape[1]

    def _reset_cache(self):
        n, d_y = self.n, self.Y.shape[0]
        self.L = np.zeros((0, 0))
        self.LY = np.zeros((0, d_y))
        self.alpha = np.zeros((d_y, 0))
        if n:
            K = gram(self.kernel, self.X)
            c, _ = _linalg.cho_factor(self.hp.gamma * np.eye(n) + K, what="gamma*I + K_pp")
            self.L = np.tril(c)
            self.LY = _linalg.solve_triangular(self.L, self.Y.T, lower=True)
            T = np.eye(n) / self.hp.eta + mask_by_ids(K, self.batch_ids)
            self.alpha = _linalg.rsolve_triangular(self.Z, T)

    def set_kernel(self, kernel):
        """Swap the kernel (e.g. a refreshed NTK snapshot); frozen targets stay."""
        self.kernel = kernel
        self._reset_cache()

    def truncate(self, n):
        """Forget everything after the first ``n`` samples (used to redo a task's epoch)."""
        self.X, self.Y, self.Z = self.X[:, :n], self.Y[:, :n], self.Z[:, :n]
        self.batch_ids = self.batch_ids[:n]
        self.records = [r for r in self.records if r.start < n]
        self._reset_cache()

    def step(self, X_new, Y_new, f_on_new=None):
        X_new = np.atleast_2d(X_new)
        Y_new = np.atleast_2d(np.asarray(Y_new, dtype=float))
        p, b = self.n, X_new.shape[1]
        hp = self.hp
        K_nn = gram(self.kernel, X_new)
        if p:
            K_pn = gram(self.kernel, self.X, X_new)
            Bm = _linalg.solve_triangular(self.L, K_pn, lower=True)
            Q = hp.gamma * np.eye(b) + K_nn - Bm.T @ Bm
            Q = 0.5 * (Q + Q.T)
            f_off = self.LY.T @ Bm
            f_on_closed = self.alpha @ K_pn
        else:
            K_pn = np.zeros((0, b))
            Bm = np.zeros((0, b))
            Q = hp.gamma * np.eye(b) + K_nn
            f_off = np.zeros_like(Y_new)
            f_on_closed = np.zeros_like(Y_new)
        f_on = f_on_closed if f_on_new is None else np.atleast_2d(f_on_new)
        gamma_o = resolve_gamma_o(K_nn, hp.gamma_o)
        coeffs = correction_coefficients(K_nn, Q, hp.eta, hp.gamma, gamma_o, self.sgd_block, 0)
        Z_new = apply_correction(Y_new, f_on, f_off, coeffs)

        try:
            L_s = np.linalg.cholesky(Q)
        except np.linalg.LinAlgError as exc:
            raise DegenerateSchurError(f"past/new kernel degeneracy: {exc}") from exc
        self.L = np.block([[self.L, np.zeros((p, b))], [Bm.T, L_s]])
        self.LY = np.vstack([self.LY, _linalg.solve_triangular(L_s, Y_new.T - Bm.T @ self.LY, lower=True)])
        T_nn = _online_T(K_nn, hp.eta, self.sgd_block, 0)
        alpha_new = _linalg.rsolve_triangular(Z_new - self.alpha @ K_pn, T_nn)
        self.alpha = np.concatenate([self.alpha, alpha_new], axis=1)
        self.X = np.concatenate([self.X, X_new], axis=1)
        self.Y = np.concatenate([self.Y, Y_new], axis=1)
        self.Z = np.concatenate([self.Z, Z_new], axis=1)
        first = self.batch_ids[-1] + 1 if p else 0
        self.batch_ids = np.concatenate([self.batch_ids, first + np.arange(b) // self.sgd_block])
        if self.keep_records:
            self.records.append(ChunkRecord(p, Z_new, coeffs, f_on, f_off))
        return Z_new

    def run(self, X, Y, chunk):
        X = np.atleast_2d(X)
        Y = np.atleast_2d(Y)
        for start in range(0, X.shape[1], chunk):
            self.step(X[:, start:start + chunk], Y[:, start:start + chunk])
        return self.targets

    @property
    def targets(self):
        return TargetMatrix(self.Z.copy(), "iterative", {"eta": self.hp.eta, "gamma": self.hp.gamma})

    def online_predictor(self):
        """Dual coefficients ``A`` of the learner trained on the corrected targets (``f = A k(X, .)``)."""
        return self.alpha.copy()


def iterative_targets(kernel, X, Y, hp, chunk, sgd_block=None):
    """Iteratively corrected targets for a whole stream in kernel mode."""
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    return IterativeCorrector(kernel, hp, X.shape[0], Y.shape[0], sgd_block).run(X, Y, chunk)
