"""A small biasless MLP, its exact parameter Jacobians and empirical NTK, and
mini-batch SGD on iteratively corrected targets with periodic NTK refresh."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .correction import IterativeCorrector
from .errors import DimensionError, StorageGuardError, TargetCorrError
from .kernels import Precomputed, indices
from .tasks import stream_rng

ACTIVATIONS = ("relu", "tanh", "identity")
SCHEDULES = ("fixed", "per_task", "per_epoch")
CORRECTIONS = ("none", "iterative")
NTK_MODES = ("trace", "per_output")
MAX_GRAM = 4096


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[d_x, h_1, ..., d_y]``; no bias terms anywhere."""

    widths: tuple = (1, 32, 1)
    activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) < 1 for w in self.widths):
            raise TargetCorrError(f"invalid layer widths {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise TargetCorrError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def shapes(self):
        return [(self.widths[i + 1], self.widths[i]) for i in range(len(self.widths) - 1)]

    @property
    def n_params(self):
        return sum(o * i for o, i in self.shapes)


def init_weights(spec, seed=0):
    """Independent N(0, 1/fan_in) entries."""
    rng = stream_rng(seed, "mlp_init")
    return [rng.standard_normal(s) / np.sqrt(s[1]) for s in spec.shapes]


def zero_weights(spec):
    return [np.zeros(s) for s in spec.shapes]


def flatten(weights):
    return np.concatenate([W.reshape(-1) for W in weights])


def unflatten(spec, theta):
    out, pos = [], 0
    for o, i in spec.shapes:
        out.append(theta[pos:pos + o * i].reshape(o, i))
        pos += o * i
    return out


def _act(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    return a


def _act_grad(name, a, h):
    if name == "relu":
        return (a > 0).astype(a.dtype)
    if name == "tanh":
        return 1.0 - h * h
    return np.ones_like(a)


def _check(spec, weights, X):
    if len(weights) != len(spec.shapes):
        raise DimensionError(f"expected {len(spec.shapes)} weight matrices, got {len(weights)}", dimension="layers")
    for W, s in zip(weights, spec.shapes):
        if W.shape != s:
            raise DimensionError(f"weight shape {W.shape} does not match {s}", dimension="weights")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != spec.widths[0]:
        raise DimensionError(f"inputs have d_x={X.shape[0]}, network expects {spec.widths[0]}", dimension="d_x")
    return X


def _forward(spec, weights, X):
    hs, pre = [X], []
    h = X
    for W in weights[:-1]:
        a = W @ h
        h = _act(spec.activation, a)
        pre.append(a)
        hs.append(h)
    return weights[-1] @ h, hs, pre


def mlp_forward(spec, weights, X):
    """Network outputs, ``d_y x n``."""
    return _forward(spec, weights, _check(spec, weights, X))[0]


def _output_deltas(spec, weights, hs, pre):
    """Per-layer ``d f_o / d (pre-activation)``, each ``n x d_y x width``."""
    n = hs[0].shape[1]
    d_y = spec.widths[-1]
    delta = np.broadcast_to(np.eye(d_y), (n, d_y, d_y))
    deltas = [delta]
    for l in range(len(weights) - 2, -1, -1):
        delta = (delta @ weights[l + 1]) * _act_grad(spec.activation, pre[l], hs[l + 1]).T[:, None, :]
        deltas.append(delta)
    return deltas[::-1]


def mlp_jacobians(spec, weights, X):
    """Jacobians of all outputs w.r.t. all weights, ``n x d_y x P``."""
    X = _check(spec, weights, X)
    _, hs, pre = _forward(spec, weights, X)
    deltas = _output_deltas(spec, weights, hs, pre)
    blocks = [np.einsum("nok,jn->nokj", d, h).reshape(X.shape[1], spec.widths[-1], -1) for d, h in zip(deltas, hs)]
    return np.concatenate(blocks, axis=2)


def mlp_jacobian(spec, weights, x):
    """Reverse-mode Jacobian ``d_y x P`` at one input; ReLU'(0) is taken as 0."""
    return mlp_jacobians(spec, weights, np.asarray(x, dtype=float).reshape(-1, 1))[0]


@dataclass(frozen=True, eq=False)
class NtkSnapshot:
    gram: np.ndarray
    taken_at: int = 0
    mode: str = "trace"


def empirical_ntk_gram(spec, weights, X, mode="trace", taken_at=0):
    """Empirical NTK ``<J(x_i), J(x_j)>``.

    ``trace`` averages over outputs (one ``n x n`` Gram); ``per_output`` keeps a
    ``d_y x n x n`` stack.  Computed layer by layer as
    ``(delta_i . delta_j) * (h_i . h_j)`` so the ``n x P`` Jacobian is never
    materialized.
    """
    if mode not in NTK_MODES:
        raise TargetCorrError(f"unknown NTK mode {mode!r}")
    X = _check(spec, weights, X)
    n = X.shape[1]
    if n > MAX_GRAM:
        raise StorageGuardError(f"NTK Gram over {n} samples exceeds the dense storage guard of {MAX_GRAM}")
    _, hs, pre = _forward(spec, weights, X)
    deltas = _output_deltas(spec, weights, hs, pre)
    d_y = spec.widths[-1]
    if mode == "trace":
        G = np.zeros((n, n))
        for d, h in zip(deltas, hs):
            D = d.reshape(n, -1)
            G += (D @ D.T) * (h.T @ h)
        G /= d_y
    else:
        G = np.zeros((d_y, n, n))
        for d, h in zip(deltas, hs):
            G += np.einsum("iok,jok->oij", d, d) * (h.T @ h)[None]
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    return NtkSnapshot(G, taken_at, mode)


def _sgd_step(spec, weights, X, T, eta):
    """One step on ``0.5 * sum ||f(x) - t||^2`` over the batch."""
    out, hs, pre = _forward(spec, weights, X)
    err = out - T
    new = list(weights)
    g = err
    for l in range(len(weights) - 1, -1, -1):
        grad = g @ hs[l].T
        if l:
            g = (weights[l].T @ g) * _act_grad(spec.activation, pre[l - 1], hs[l])
        new[l] = weights[l] - eta * grad
    return new


def mse(pred, Y):
    return float(np.mean((pred - Y) ** 2))


def accuracy(pred, labels):
    """Argmax over outputs; ties go to the lowest index."""
    if labels is None:
        return None
    return float(np.mean(np.argmax(pred, axis=0) == labels))


@dataclass
class TrainResult:
    trace: list
    weights: list
    targets: np.ndarray
    snapshots: list = field(default_factory=list)
    corrector: Optional[IterativeCorrector] = None


def train_corrected(
    spec,
    train,
    hp,
    schedule="per_task",
    correction="none",
    boundaries=None,
    test=None,
    chunk=20,
    epochs=1,
    eval_every=16,
    weights=None,
    ntk_mode="trace",
):
    """Mini-batch SGD on MSE, optionally with iteratively corrected targets.

    Tasks are processed in order; each task may run several epochs.  Within a
    task the stream is cut into correction chunks of ``chunk`` samples and
    each chunk into SGD batches of ``hp.b`` samples (batches restart at chunk
    starts; without correction they only restart at task starts).  With ``correction="iterative"`` the chunk targets come from the
    iterative correction using the current NTK snapshot as the kernel, the
    live network's outputs as the online prediction and the snapshot's
    offline ridge fit on past samples as the offline prediction.
    """
    if schedule not in SCHEDULES:
        raise TargetCorrError(f"unknown schedule {schedule!r}")
    if correction not in CORRECTIONS:
        raise TargetCorrError(f"unknown correction {correction!r}")
    n = train.n
    if n > MAX_GRAM and correction == "iterative":
        raise StorageGuardError(f"snapshot over {n} samples exceeds the dense storage guard of {MAX_GRAM}")
    boundaries = [0, n] if boundaries is None else list(boundaries)
    w = init_weights(spec, hp.seed) if weights is None else [np.array(W, dtype=float) for W in weights]
    X, Y = train.X, train.Y
    d_y = Y.shape[0]
    targets = np.array(Y, dtype=float)
    iterative = correction == "iterative"
    corrector = IterativeCorrector(None, hp, 1, d_y, sgd_block=hp.b) if iterative else None
    snapshots = []
    trace = []
    step = 0

    def record(task, epoch):
        row = {"step": step, "task_id": task, "epoch": epoch, "train_mse": mse(mlp_forward(spec, w, X), Y)}
        if test is not None:
            pred = mlp_forward(spec, w, test.X)
            row["test_mse"] = mse(pred, test.Y)
            row["test_accuracy"] = accuracy(pred, test.labels)
        else:
            row["test_mse"] = None
            row["test_accuracy"] = None
        trace.append(row)

    def refresh(upto):
        snap = empirical_ntk_gram(spec, w, X[:, :upto], ntk_mode, taken_at=step)
        snapshots.append(snap)
        G = snap.gram if snap.gram.ndim == 2 else snap.gram.mean(axis=0)
        corrector.set_kernel(Precomputed(G))

    fixed_targets = {}
    if iterative and schedule == "fixed":
        refresh(n)

    for task, (start, end) in enumerate(zip(boundaries[:-1], boundaries[1:])):
        for epoch in range(epochs):
            if iterative:
                reuse = schedule == "fixed" and epoch > 0
                if not reuse:
                    if corrector.n > start:
                        corrector.truncate(start)
                    if schedule == "per_task" and epoch == 0 or schedule == "per_epoch":
                        refresh(end)
            span = chunk if iterative else end - start
            for c0 in range(start, end, span):
                c1 = min(c0 + span, end)
                if iterative:
                    if schedule == "fixed" and epoch > 0:
                        targets[:, c0:c1] = fixed_targets[c0]
                    else:
                        f_on = mlp_forward(spec, w, X[:, c0:c1])
                        Z = corrector.step(indices(c1 - c0, c0), Y[:, c0:c1], f_on_new=f_on)
                        targets[:, c0:c1] = Z
                        fixed_targets[c0] = Z
                for b0 in range(c0, c1, hp.b):
                    b1 = min(b0 + hp.b, c1)
                    w = _sgd_step(spec, w, X[:, b0:b1], targets[:, b0:b1], hp.eta)
                    step += 1
                    if eval_every and step % eval_every == 0:
                        record(task, epoch)
    if not trace or trace[-1]["step"] != step:
        record(len(boundaries) - 2, epochs - 1)
    return TrainResult(trace, w, targets, snapshots, corrector)
