"""Configuration-driven experiments: learning curves for kernel and network
learners, seed aggregation, curve export and the equivalence report.

A config is plain JSON.  Every key has a default and unknown keys are
rejected::

    {
      "task": {"kind": "gp1d", "ordering": "as_generated"},
      "kernel": {"kind": "rbf", "bandwidth": 0.1},
      "learners": ["offline", "online_true", "online_corrected"],
      "hp": {"eta": 0.5, "gamma": 1.0, "gamma_o": 0.0, "b": 1},
      "mlp": {"hidden": [64], "activation": "relu", "schedule": "per_task",
              "correction": "iterative", "chunk": 20, "epochs": 1},
      "eval_every": 16, "correction_chunk": 16, "seeds": [0],
      "grid": {"eta": [0.1, 0.5]}, "workers": 1
    }

A learner entry is a name or an object ``{"kind": ..., "tag": ..., ...}``; for
``sgd_mlp`` the object may override any ``mlp`` key.
"""

import csv
import io
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional

import numpy as np

from . import _linalg
from .correction import (
    CorrectionStep,
    CorrectionTracker,
    IterativeCorrector,
    corrected_targets,
    iterative_correction,
    iterative_correction_bcg_oracle,
)
from .errors import ConfigError, NumericalError, TargetCorrError
from .kernels import (
    RBF,
    Precomputed,
    directional_mask,
    extended_features,
    gram,
    indices,
    kernel_from_descriptor,
    linear_kernel,
)
from .ntk import ACTIVATIONS, CORRECTIONS, NTK_MODES, SCHEDULES, MlpSpec, accuracy, mse, train_corrected
from .regression import (
    HyperParams,
    Predictor,
    fit_minibatch,
    fit_offline,
    fit_online,
    minibatch_closed_form,
    minibatch_coefficients,
    offline_coefficients,
    offline_predict,
    online_closed_form,
    sgd_run,
)
from .shift import ShiftTracker, effective_targets
from .tasks import Gp1d, TaskConfig, gen_random_feature_map, make_task

LEARNERS = ("offline", "online_true", "online_corrected", "online_iter_corrected", "sgd_mlp", "cumulative_replay")
CURVE_COLUMNS = ("seed", "step", "learner", "train_mse", "test_mse", "test_accuracy")
EVAL_EVERY = 16
KERNEL_CHUNK = 16
NTK_CHUNK = 20
TOL_PREDICT = 1e-8
TOL_BCG = 1e-9
TOL_ONE_STEP = 1e-10


class ExperimentError(TargetCorrError):
    """A module error raised while running one seed, with its (seed, step) context."""

    def __init__(self, message, seed=None, step=None, learner=None, cause=None):
        super().__init__(message)
        self.seed, self.step, self.learner, self.cause = seed, step, learner, cause


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class MlpConfig:
    hidden: tuple = (64,)
    activation: str = "relu"
    schedule: str = "per_task"
    correction: str = "iterative"
    chunk: int = NTK_CHUNK
    epochs: int = 1
    ntk_mode: str = "trace"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for value, allowed, what in (
            (self.activation, ACTIVATIONS, "activation"),
            (self.schedule, SCHEDULES, "schedule"),
            (self.correction, CORRECTIONS, "correction"),
            (self.ntk_mode, NTK_MODES, "ntk_mode"),
        ):
            if value not in allowed:
                raise ConfigError(f"unknown {what} {value!r}; choose from {allowed}")
        if self.chunk < 1 or self.epochs < 1:
            raise ConfigError("mlp chunk and epochs must be >= 1")


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    tag: str
    mlp: Optional[MlpConfig] = None


def _strict(cls, d, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be an object, got {type(d).__name__}")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except TargetCorrError as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def _learner(entry, mlp):
    if isinstance(entry, str):
        entry = {"kind": entry}
    if not isinstance(entry, dict) or "kind" not in entry:
        raise ConfigError(f"learner entries need a kind, got {entry!r}")
    entry = dict(entry)
    kind = entry.pop("kind")
    if kind not in LEARNERS:
        raise ConfigError(f"unknown learner {kind!r}; choose from {LEARNERS}")
    tag = entry.pop("tag", None)
    if kind != "sgd_mlp":
        if entry:
            raise ConfigError(f"learner {kind} takes no options, got {sorted(entry)}")
        return LearnerSpec(kind, tag or kind)
    spec = _strict(MlpConfig, {**asdict(mlp), **entry}, "mlp")
    return LearnerSpec(kind, tag or f"sgd_mlp:{spec.correction}:{spec.schedule}", spec)


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = TaskConfig()
    kernel: dict = field(default_factory=lambda: {"kind": "rbf", "bandwidth": 0.1})
    learners: tuple = ("offline", "online_true", "online_corrected")
    hp: HyperParams = HyperParams()
    mlp: MlpConfig = MlpConfig()
    eval_every: int = EVAL_EVERY
    correction_chunk: int = KERNEL_CHUNK
    seeds: tuple = (0,)
    grid: Optional[dict] = None
    workers: int = 1

    def __post_init__(self):
        if self.eval_every < 1 or self.correction_chunk < 1:
            raise ConfigError("eval_every and correction_chunk must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.grid:
            bad = set(self.grid) - {"eta", "gamma", "b"}
            if bad:
                raise ConfigError(f"grid keys must be among eta, gamma, b; got {sorted(bad)}")
        specs = self.learner_specs()
        tags = [s.tag for s in specs]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"learner tags must be unique, got {tags}")

    def learner_specs(self) -> List[LearnerSpec]:
        return [_learner(e, self.mlp) for e in self.learners]

    def to_dict(self):
        out = {
            "task": self.task.to_dict(),
            "kernel": dict(self.kernel),
            "learners": [e if isinstance(e, str) else dict(e) for e in self.learners],
            "hp": asdict(self.hp),
            "mlp": {**asdict(self.mlp), "hidden": list(self.mlp.hidden)},
            "eval_every": self.eval_every,
            "correction_chunk": self.correction_chunk,
            "seeds": list(self.seeds),
            "workers": self.workers,
        }
        if self.grid:
            out["grid"] = {k: list(v) for k, v in self.grid.items()}
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        if "task" in d:
            kw["task"] = TaskConfig.from_dict(d["task"])
        if "kernel" in d:
            if not isinstance(d["kernel"], dict) or "kind" not in d["kernel"]:
                raise ConfigError("kernel must be an object with a kind")
            kw["kernel"] = dict(d["kernel"])
        if "learners" in d:
            kw["learners"] = tuple(d["learners"])
        if "hp" in d:
            kw["hp"] = _strict(HyperParams, d["hp"], "hp")
        if "mlp" in d:
            kw["mlp"] = _strict(MlpConfig, d["mlp"], "mlp")
        for key in ("eval_every", "correction_chunk", "workers"):
            if key in d:
                kw[key] = int(d[key])
        if "seeds" in d:
            kw["seeds"] = tuple(int(s) for s in d["seeds"])
        if "grid" in d:
            kw["grid"] = {k: tuple(v) for k, v in (d["grid"] or {}).items()} or None
        return cls(**kw)


def load_config(path):
    with open(path) as fh:
        try:
            return ExperimentConfig.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def build_kernel(desc, d_x=None, seed=0):
    """Kernel from a config descriptor; random-feature maps are drawn from ``seed``."""
    kind = desc.get("kind")
    extra = set(desc) - {"kind", "bandwidth", "d_x", "d_J", "J", "name"}
    if extra:
        raise ConfigError(f"unknown kernel keys: {sorted(extra)}")
    if kind == "random_feature_tanh" and "J" not in desc:
        return gen_random_feature_map(int(desc.get("d_J", 100)), int(d_x or desc.get("d_x", 1)), seed)
    if kind == "linear":
        return linear_kernel(d_x)
    try:
        return kernel_from_descriptor(desc)
    except TargetCorrError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- curves


@dataclass(frozen=True)
class CurveRecord:
    seed: int
    step: int
    learner: str
    train_mse: float
    test_mse: float
    test_accuracy: Optional[float] = None


def _eval_steps(n_updates, every):
    steps = list(range(every, n_updates + 1, every))
    if not steps or steps[-1] != n_updates:
        steps.append(n_updates)
    return steps


def _update_ends(batch_ids):
    """Sample count consumed after each update, from per-sample batch ids."""
    ids = np.asarray(batch_ids)
    return np.flatnonzero(np.diff(ids, append=ids[-1] + 1)) + 1


class _Ctx:
    step = None


def _dual_curve(tag, seed, coef, ends, K, K_test, train, test, every, ctx):
    """Records for a prefix-stable dual predictor ``coef`` evaluated after each update."""
    out = []
    for s in _eval_steps(len(ends), every):
        ctx.step = s
        e = ends[s - 1]
        out.append(_record(seed, s, tag, coef[:, :e] @ K[:e], coef[:, :e] @ K_test[:e], train, test))
    return out


def _record(seed, step, tag, pred_train, pred_test, train, test):
    acc = accuracy(pred_test, test.labels) if test.labels is not None else None
    return CurveRecord(seed, int(step), tag, mse(pred_train, train.Y), mse(pred_test, test.Y), acc)


def _kernel_learner(spec, kernel, train, test, hp, cfg, seed, ctx, cache):
    n = train.n
    if "K" not in cache:
        cache["K"] = gram(kernel, train.X)
        cache["K_test"] = gram(kernel, train.X, test.X)
    K, K_test = cache["K"], cache["K_test"]
    b = min(hp.b, n)
    uniform = _update_ends(np.arange(n) // b)
    if spec.kind == "offline":
        coef = offline_coefficients(K, train.Y, hp.gamma)
        pt, pe = coef @ K, coef @ K_test
        return [_record(seed, s, spec.tag, pt, pe, train, test) for s in _eval_steps(len(uniform), cfg.eval_every)]
    if spec.kind == "cumulative_replay":
        out = []
        for s in _eval_steps(len(uniform), cfg.eval_every):
            ctx.step = s
            e = uniform[s - 1]
            coef = offline_coefficients(K[:e, :e], train.Y[:, :e], hp.gamma)
            out.append(_record(seed, s, spec.tag, coef @ K[:e], coef @ K_test[:e], train, test))
        return out
    if spec.kind == "online_true":
        coef = minibatch_coefficients(K, train.Y, hp.eta, b)
        return _dual_curve(spec.tag, seed, coef, uniform, K, K_test, train, test, cfg.eval_every, ctx)
    if spec.kind == "online_corrected":
        Yc = offline_coefficients(K, train.Y, hp.gamma) @ (np.eye(n) / hp.eta + directional_mask(K, b))
        coef = minibatch_coefficients(K, Yc, hp.eta, b)
        return _dual_curve(spec.tag, seed, coef, uniform, K, K_test, train, test, cfg.eval_every, ctx)
    if spec.kind == "online_iter_corrected":
        corrector = IterativeCorrector(kernel, hp, train.d_x, train.d_y, sgd_block=b)
        corrector.run(train.X, train.Y, cfg.correction_chunk)
        ends = _update_ends(corrector.batch_ids)
        return _dual_curve(spec.tag, seed, corrector.alpha, ends, K, K_test, train, test, cfg.eval_every, ctx)
    raise ConfigError(f"unknown kernel learner {spec.kind!r}")


def fit_predictor(kind, kernel, train, hp, chunk=KERNEL_CHUNK):
    """Final predictor of a kernel learner after the whole stream."""
    b = min(hp.b, train.n)
    form = "online_closed_form" if b == 1 else "minibatch_closed_form"
    hyper = {"eta": hp.eta, "gamma": 0.0} if b == 1 else {"eta": hp.eta, "b": b}
    if kind in ("offline", "cumulative_replay"):
        return fit_offline(kernel, train.X, train.Y, hp.gamma)
    if kind == "online_true":
        return fit_online(kernel, train.X, train.Y, hp.eta) if b == 1 else fit_minibatch(kernel, train.X, train.Y, hp.eta, b)
    if kind == "online_corrected":
        Yc = corrected_targets(kernel, train.X, train.Y, hp.eta, hp.gamma, b).values
        return fit_online(kernel, train.X, Yc, hp.eta) if b == 1 else fit_minibatch(kernel, train.X, Yc, hp.eta, b)
    if kind == "online_iter_corrected":
        corrector = IterativeCorrector(kernel, hp, train.d_x, train.d_y, sgd_block=b)
        corrector.run(train.X, train.Y, chunk)
        return Predictor(form, kernel, corrector.alpha, train.X, {**hyper, "targets": "iterative", "chunk": chunk})
    raise ConfigError(f"{kind} has no kernel-form predictor")


def _mlp_learner(spec, train, test, boundaries, hp, cfg, seed):
    m = spec.mlp
    net = MlpSpec((train.d_x, *m.hidden, train.d_y), m.activation)
    res = train_corrected(
        net, train, hp, schedule=m.schedule, correction=m.correction, boundaries=boundaries, test=test,
        chunk=m.chunk, epochs=m.epochs, eval_every=cfg.eval_every, ntk_mode=m.ntk_mode,
    )
    return [CurveRecord(seed, r["step"], spec.tag, r["train_mse"], r["test_mse"], r["test_accuracy"]) for r in res.trace]


def _grid_points(cfg):
    if not cfg.grid:
        return [(cfg.hp, "")]
    keys = sorted(cfg.grid)
    out = []
    for combo in itertools.product(*(cfg.grid[k] for k in keys)):
        values = dict(zip(keys, combo))
        if "b" in values:
            values["b"] = int(values["b"])
        suffix = "@" + ",".join(f"{k}={values[k]:g}" for k in keys)
        out.append((replace(cfg.hp, **values), suffix))
    return out


def run_seed(cfg, seed):
    """All curve records of one seed; module errors carry (seed, step) context."""
    ctx = _Ctx()
    records = []
    spec = None
    try:
        train, test, boundaries, _ = make_task(replace(cfg.task, seed=seed))
        kernel = build_kernel(cfg.kernel, train.d_x, seed)
        for hp, suffix in _grid_points(cfg):
            hp = replace(hp, seed=seed)
            cache = {}
            for spec in cfg.learner_specs():
                ctx.step = None
                tagged = replace(spec, tag=spec.tag + suffix)
                if spec.kind == "sgd_mlp":
                    records += _mlp_learner(tagged, train, test, boundaries, hp, cfg, seed)
                else:
                    records += _kernel_learner(tagged, kernel, train, test, hp, cfg, seed, ctx, cache)
    except TargetCorrError as exc:
        where = f"seed={seed}, step={ctx.step}" + (f", learner={spec.tag}" if spec else "")
        raise ExperimentError(f"{where}: {exc}", seed, ctx.step, spec.tag if spec else None, exc) from exc
    return records


def _sem(values):
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size < 2:
        return None
    return float(np.std(v, ddof=1) / np.sqrt(v.size))


def summarize(records):
    """Mean and SEM (sample std / sqrt(#seeds)) of each learner's final metrics."""
    finals = {}
    for r in records:
        key = (r.learner, r.seed)
        if key not in finals or r.step > finals[key].step:
            finals[key] = r
    out = {}
    for tag in dict.fromkeys(r.learner for r in records):
        rows = [r for (t, _), r in sorted(finals.items()) if t == tag]
        entry = {"n_seeds": len(rows)}
        for metric in ("train_mse", "test_mse", "test_accuracy"):
            vals = [getattr(r, metric) for r in rows]
            if any(v is None for v in vals):
                entry[metric] = None
                continue
            entry[metric] = {"mean": float(np.mean(vals)), "sem": _sem(vals)}
        out[tag] = entry
    return out


@dataclass
class ExperimentResult:
    records: List[CurveRecord]
    summary: dict


def run_experiment(cfg, seeds=None):
    """Run every learner for every seed; returns records in (seed, learner, step) order."""
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    if cfg.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_seed = list(pool.map(run_seed, [cfg] * len(seeds), seeds))
    else:
        per_seed = [run_seed(cfg, s) for s in seeds]
    records = [r for rs in per_seed for r in rs]
    return ExperimentResult(records, summarize(records))


def _fmt(v):
    return "" if v is None else repr(float(v))


def export_curves(records, path, fmt="csv"):
    """Write records as CSV (fixed column order) or a JSON array; output bytes are deterministic."""
    if not records:
        raise TargetCorrError("no curve records to export")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in records:
            w.writerow([r.seed, r.step, r.learner, _fmt(r.train_mse), _fmt(r.test_mse), _fmt(r.test_accuracy)])
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps([asdict(r) for r in records], indent=2) + "\n"
    else:
        raise ConfigError(f"unknown format {fmt!r}; choose csv or json")
    with open(path, "w", newline="") as fh:
        fh.write(text)


def import_curves(path, fmt=None):
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    with open(path, newline="") as fh:
        if fmt == "json":
            return [CurveRecord(**d) for d in json.load(fh)]
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
            raise TargetCorrError(f"unexpected curve columns {reader.fieldnames}")
        opt = lambda v: None if v == "" else float(v)
        return [
            CurveRecord(int(r["seed"]), int(r["step"]), r["learner"], opt(r["train_mse"]), opt(r["test_mse"]), opt(r["test_accuracy"]))
            for r in reader
        ]


# ---------------------------------------------------------------- equivalence report


@dataclass
class Check:
    name: str
    identity: str
    tolerance: float
    max_dev: Optional[float]
    error: Optional[str] = None
    note: str = ""
    numerical: bool = False

    @property
    def passed(self):
        return self.error is None and self.max_dev is not None and self.max_dev < self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        dev = "n/a" if self.max_dev is None else f"{self.max_dev:.3e}"
        tail = f"  [{self.error}]" if self.error else ""
        note = f"  ({self.note})" if self.note else ""
        return f"{status}  {self.name:<34s} max|dev| = {dev:>10s}  tol = {self.tolerance:.0e}{note}{tail}"


@dataclass
class EquivalenceReport:
    checks: List[Check]

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    @property
    def numerical_failure(self):
        return any(c.numerical for c in self.failures)

    def lines(self):
        out = [c.line() for c in self.checks]
        if self.failures:
            out.append("violated: " + "; ".join(f"{c.name}: {c.identity}" for c in self.failures))
        return out

    def to_dict(self):
        return {
            "passed": self.passed,
            "checks": [{**asdict(c), "passed": c.passed} for c in self.checks],
        }


_MAX_BITS = 8192


def _max_dev(a, b):
    # subtract before rounding so extended operands keep their low digits
    return float(np.max(np.abs(_linalg.to_float(np.asarray(a) - np.asarray(b))))) if np.size(a) else 0.0


def sgd_closed_form_deviation(kernel, train, test, eta, gamma=0.0, b=1, tol=TOL_PREDICT, bits=_linalg.DEFAULT_BITS,
                              extended_kernel=None):
    """Max |SGD - closed form| at the test points, plus the precision used.

    Runs in float64 first.  Divergent runs (large ``eta * k``) grow to
    magnitudes where float64 cannot resolve ``tol``; those are redone with
    ``bits``-bit mpfr arithmetic on the same feature map.  Pass a shared
    ``extended_kernel`` (from ``extended_features(kernel)``) to reuse its
    cached Grams across calls.
    """

    def legs(kern):
        W = sgd_run(kern, train, eta, gamma, b, record=False).predictor(test.X)
        if b == 1:
            C = online_closed_form(kern, train.X, train.Y, eta, gamma, test.X)
        else:
            C = minibatch_closed_form(kern, train.X, train.Y, eta, min(b, train.n), test.X)
        return W, C

    W, C = legs(kernel)
    dev = _max_dev(W, C)
    if np.isfinite(dev) and dev < tol:
        return dev, "float64"
    # absolute resolution at |f| needs about log2(|f| / tol) mantissa bits
    mag = float(np.max(np.abs(C))) if np.size(C) else 0.0
    if np.isfinite(mag) and mag > 0:
        bits = max(bits, int(np.ceil(np.log2(mag / tol))) + 64)
    ext = extended_kernel or extended_features(kernel)
    while True:
        with _linalg.extended_precision(bits):
            W, C = legs(ext)
            ext_dev = _max_dev(W, C)
            mag = float(np.max(np.abs(_linalg.to_float(C))))
        if ext_dev < tol or bits >= _MAX_BITS:
            return ext_dev, f"float64 {dev:.1e} at |f| {mag:.1e}; {bits}-bit"
        bits *= 2


def _check(name, identity, tol, fn):
    try:
        dev, note = fn()
        return Check(name, identity, tol, dev, note=note)
    except NumericalError as exc:
        return Check(name, identity, tol, None, error=f"{type(exc).__name__}: {exc}", numerical=True)


def _take(ds, m):
    return ds if m is None or ds.n <= m else ds.prefix(m)


def equivalence_report(task=None, hp=None, kernel=None, sgd_kernel=None, chunk=KERNEL_CHUNK,
                       blocks=(2, 4, 8), max_train=128, max_test=256):
    """Run the equivalence identities on one task and collect max deviations.

    ``sgd_kernel`` (explicit features, default a seeded tanh random-feature
    map with 100 features) drives the SGD legs; ``kernel`` (default the
    task's RBF) drives the target-shift/correction identities.  At most
    ``max_train`` / ``max_test`` samples of the task are used.
    """
    task = task or TaskConfig()
    hp = hp or HyperParams()
    train, test, _, _ = make_task(task)
    train, test = _take(train, max_train), _take(test, max_test)
    X, Y, Xs = train.X, train.Y, test.X
    if kernel is None:
        kernel = RBF(task.spec.bandwidth) if isinstance(task.spec, Gp1d) else RBF(1.0)
    if sgd_kernel is None:
        sgd_kernel = gen_random_feature_map(100, train.d_x, task.seed)
    eta, gamma = hp.eta, hp.gamma
    ext = extended_features(sgd_kernel)
    checks = []

    for g in dict.fromkeys((0.0, gamma)):
        checks.append(_check(
            f"online sgd vs closed form (gamma={g:g})", "sgd_run == online_closed_form", TOL_PREDICT,
            lambda g=g: sgd_closed_form_deviation(sgd_kernel, train, test, eta, g, extended_kernel=ext),
        ))
    for b in blocks:
        b_eff = min(b, train.n)
        checks.append(_check(
            f"minibatch sgd vs closed form (b={b})", "minibatch sgd_run == minibatch_closed_form", TOL_PREDICT,
            lambda b_eff=b_eff: sgd_closed_form_deviation(sgd_kernel, train, test, eta, 0.0, b_eff, extended_kernel=ext),
        ))

    def thm1():
        Ye = effective_targets(kernel, X, Y, eta, gamma).values
        return _max_dev(offline_predict(kernel, X, Ye, gamma, Xs), online_closed_form(kernel, X, Y, eta, 0.0, Xs)), ""

    def thm2():
        Yc = corrected_targets(kernel, X, Y, eta, gamma).values
        return _max_dev(online_closed_form(kernel, X, Yc, eta, 0.0, Xs), offline_predict(kernel, X, Y, gamma, Xs)), ""

    def composition():
        Yc = corrected_targets(kernel, X, Y, eta, gamma).values
        Ye = effective_targets(kernel, X, Y, eta, gamma).values
        a = effective_targets(kernel, X, Yc, eta, gamma).values
        c = corrected_targets(kernel, X, Ye, eta, gamma).values
        return max(_max_dev(a, Y), _max_dev(c, Y)), ""

    def one_step_shift():
        tracker = ShiftTracker(kernel, eta, gamma, train.d_y, train.d_x)
        dev = 0.0
        for t in range(train.n):
            tracker.push(X[:, t], Y[:, t])
            batch = effective_targets(kernel, X[:, :t + 1], Y[:, :t + 1], eta, gamma).values
            dev = max(dev, _max_dev(tracker.targets.values, batch))
        return dev, f"every prefix n <= {train.n}"

    def one_step_correction():
        tracker = CorrectionTracker(kernel, eta, gamma, train.d_y, train.d_x)
        dev = 0.0
        for t in range(train.n):
            tracker.push(X[:, t], Y[:, t])
            batch = corrected_targets(kernel, X[:, :t + 1], Y[:, :t + 1], eta, gamma).values
            dev = max(dev, _max_dev(tracker.targets.values, batch))
        return dev, f"every prefix n <= {train.n}"

    def bcg():
        steps, Z, dev = [], np.zeros((train.d_y, 0)), 0.0
        for s in range(0, train.n, chunk):
            e = min(s + chunk, train.n)
            step = CorrectionStep(X[:, :s], X[:, s:e], Y[:, :s], Y[:, s:e], Z, hp)
            Z_new, coeffs = iterative_correction(kernel, step)
            dev = max(dev, _max_dev(Z_new, iterative_correction_bcg_oracle(kernel, step, coeffs.gamma_o)))
            steps.append((s, e, Z, coeffs.gamma_o))
            Z = np.concatenate([Z, Z_new], axis=1)
        note = f"{len(steps)} chunks of {chunk}"
        if dev < TOL_BCG:
            return dev, note
        # both paths again on the same float64 Gram, lifted exactly to mpfr
        with _linalg.extended_precision():
            ext = Precomputed(_linalg.extended(gram(kernel, X)))
            I = indices(train.n)
            dev_ext = 0.0
            for s, e, Z_past, gamma_o in steps:
                step = CorrectionStep(I[:, :s], I[:, s:e], Y[:, :s], Y[:, s:e], Z_past, replace(hp, gamma_o=gamma_o))
                Z_new, _ = iterative_correction(ext, step)
                dev_ext = max(dev_ext, _max_dev(Z_new, iterative_correction_bcg_oracle(ext, step, gamma_o)))
        return dev_ext, f"{note}; float64 {dev:.1e}, 512-bit"

    checks.append(_check("offline on effective targets", "offline(Y^e) == online(Y)", TOL_PREDICT, thm1))
    checks.append(_check("online on corrected targets", "online(Y^c) == offline(Y)", TOL_PREDICT, thm2))
    checks.append(_check("shift/correction composition", "Y^e(Y^c) == Y^c(Y^e) == Y", TOL_ONE_STEP, composition))
    checks.append(_check("one-step shift vs batch", "shift_one_step* == effective_targets", TOL_ONE_STEP, one_step_shift))
    checks.append(_check("one-step correction vs batch", "correction_one_step* == corrected_targets", TOL_ONE_STEP, one_step_correction))
    checks.append(_check("iterative correction vs BCG oracle", "chunk targets == (G - Z_past B) C^-1", TOL_BCG, bcg))
    return EquivalenceReport(checks)
