"""Deterministic synthetic tasks and presentation-order policies.

Randomness comes from named streams: ``stream_rng(seed, "split")`` is a PCG64
generator seeded with ``SeedSequence([seed, crc32("split")])``.  Each
generator draws from its own named streams, so adding a stream never changes
the values drawn from another, and results are identical across platforms.
"""

import csv
import json
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, NumericalError
from .kernels import RBF, RandomFeatureTanh, gram
from .regression import OrderedDataset

ORDERINGS = ("as_generated", "random_shuffle", "class_incremental", "domain_incremental")


def stream_rng(seed, stream):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())])))


@dataclass(frozen=True)
class Gp1d:
    bandwidth: float = 0.1
    noise: float = 0.3
    n_train: int = 40
    n_test: int = 160
    grid_step: float = 0.005

    kind = "gp1d"


@dataclass(frozen=True)
class ClusterClassification:
    n_classes: int = 10
    d_x: int = 16
    spread: float = 0.3
    n_train: int = 1024
    n_test: int = 256

    kind = "clusters"


@dataclass(frozen=True)
class RandomFeatureKernel:
    d_J: int = 100
    d_x: int = 1

    kind = "random_features"


TASK_KINDS = {cls.kind: cls for cls in (Gp1d, ClusterClassification, RandomFeatureKernel)}


@dataclass(frozen=True)
class TaskConfig:
    spec: object = Gp1d()
    ordering: str = "as_generated"
    pairings: Optional[Tuple[Tuple[int, int], ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"unknown ordering {self.ordering!r}; choose from {ORDERINGS}")

    def to_dict(self):
        out = {"kind": self.spec.kind, **asdict(self.spec), "ordering": self.ordering, "seed": self.seed}
        if self.pairings is not None:
            out["pairings"] = [list(p) for p in self.pairings]
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", "gp1d")
        if kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {kind!r}")
        spec_cls = TASK_KINDS[kind]
        own = {"ordering", "pairings", "seed"}
        allowed = {f.name for f in fields(spec_cls)}
        unknown = set(d) - allowed - own
        if unknown:
            raise ConfigError(f"unknown task keys for {kind}: {sorted(unknown)}")
        spec = spec_cls(**{k: v for k, v in d.items() if k in allowed})
        pairings = d.get("pairings")
        return cls(
            spec,
            d.get("ordering", "as_generated"),
            None if pairings is None else tuple(tuple(int(c) for c in p) for p in pairings),
            int(d.get("seed", 0)),
        )


def _grid(step):
    count = int(round(1.0 / step)) + 1
    return np.round(np.arange(count) * step, 12)


def _jittered_cholesky(K):
    n = K.shape[0]
    jitter = 1e-10 * n
    for _ in range(3):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 100
    raise NumericalError(f"grid Gram is numerically singular even with jitter {jitter / 100:.1e}")


def gen_gp1d(cfg=Gp1d(), seed=0):
    """Sample a GP curve on a 1-D grid and split disjoint noisy train/test sets.

    Returns ``(train, test, (grid, f_star))``.
    """
    grid = _grid(cfg.grid_step)
    if cfg.n_train + cfg.n_test > grid.size:
        raise ConfigError(f"{cfg.n_train}+{cfg.n_test} samples do not fit on a {grid.size}-point grid")
    L = _jittered_cholesky(gram(RBF(cfg.bandwidth), grid[None, :]))
    f_star = L @ stream_rng(seed, "f_star").standard_normal(grid.size)
    perm = stream_rng(seed, "split").permutation(grid.size)
    tr, te = perm[:cfg.n_train], perm[cfg.n_train:cfg.n_train + cfg.n_test]
    y_tr = f_star[tr] + cfg.noise * stream_rng(seed, "noise_train").standard_normal(tr.size)
    y_te = f_star[te] + cfg.noise * stream_rng(seed, "noise_test").standard_normal(te.size)
    train = OrderedDataset(grid[tr][None, :], y_tr[None, :])
    test = OrderedDataset(grid[te][None, :], y_te[None, :])
    return train, test, (grid, f_star)


def gen_random_feature_map(d_J=100, d_x=1, seed=0):
    """``k(x, x') = tanh(J x)^T tanh(J x')`` with ``J`` entries drawn N(0, 1)."""
    if d_J < 1:
        raise ConfigError(f"d_J must be >= 1, got {d_J}")
    return RandomFeatureTanh(stream_rng(seed, "projection").standard_normal((d_J, d_x)))


def _one_hot(labels, n_classes):
    Y = np.zeros((n_classes, labels.size))
    Y[labels, np.arange(labels.size)] = 1.0
    return Y


def gen_cluster_classification(cfg=ClusterClassification(), seed=0):
    """Gaussian clusters around unit-sphere means; one-hot targets.

    Class counts are balanced (the first ``n % n_classes`` classes get one
    extra sample).  Samples come out randomly interleaved.
    """
    if cfg.n_classes < 2:
        raise ConfigError("cluster classification needs at least two classes")
    means = stream_rng(seed, "means").standard_normal((cfg.d_x, cfg.n_classes))
    means /= np.linalg.norm(means, axis=0, keepdims=True)

    def draw(n, stream):
        labels = np.arange(n) % cfg.n_classes
        labels = labels[stream_rng(seed, stream + "_order").permutation(n)]
        X = means[:, labels] + cfg.spread * stream_rng(seed, stream).standard_normal((cfg.d_x, n))
        return OrderedDataset(X, _one_hot(labels, cfg.n_classes), labels)

    return draw(cfg.n_train, "train"), draw(cfg.n_test, "test")


def default_pairings(n_classes):
    if n_classes % 2:
        raise ConfigError(f"domain-incremental ordering needs an even class count, got {n_classes}")
    return tuple((2 * i, 2 * i + 1) for i in range(n_classes // 2))


def remap_pairs(dataset, pairings):
    """Binary targets on a shared 2-unit head: the first class of each pair -> [1, 0]."""
    if dataset.labels is None:
        raise ConfigError("domain-incremental ordering requires labels")
    task_of, pos_of = {}, {}
    for t, pair in enumerate(pairings):
        for pos, c in enumerate(pair):
            task_of[int(c)], pos_of[int(c)] = t, pos
    missing = set(np.unique(dataset.labels).tolist()) - set(task_of)
    if missing:
        raise ConfigError(f"labels {sorted(missing)} are not covered by the pairings")
    labels = np.array([pos_of[int(c)] for c in dataset.labels])
    tasks = np.array([task_of[int(c)] for c in dataset.labels])
    return OrderedDataset(dataset.X, _one_hot(labels, 2), labels, tasks)


def _boundaries(task_ids):
    starts = [0] + [i for i in range(1, task_ids.size) if task_ids[i] != task_ids[i - 1]]
    return starts + [int(task_ids.size)]


def order_samples(dataset, policy="as_generated", seed=0, pairings=None):
    """Reorder a dataset; returns ``(dataset, boundaries)``.

    ``boundaries`` lists each task's first index followed by ``n``.
    """
    n = dataset.n
    if policy == "as_generated":
        ds = dataset
        ids = np.zeros(n, dtype=int) if ds.task_ids is None else ds.task_ids
    elif policy == "random_shuffle":
        ds = dataset.take(stream_rng(seed, "order").permutation(n))
        ids = np.zeros(n, dtype=int)
    elif policy == "class_incremental":
        if dataset.labels is None:
            raise ConfigError("class-incremental ordering requires labels")
        ds = dataset.take(np.argsort(dataset.labels, kind="stable"))
        ids = np.unique(ds.labels, return_inverse=True)[1]
    elif policy == "domain_incremental":
        if dataset.labels is None:
            raise ConfigError("domain-incremental ordering requires labels")
        if pairings is None:
            pairings = default_pairings(int(dataset.labels.max()) + 1)
        remapped = remap_pairs(dataset, pairings)
        ds = remapped.take(np.argsort(remapped.task_ids, kind="stable"))
        ids = ds.task_ids
    else:
        raise ConfigError(f"unknown ordering policy {policy!r}")
    ds = OrderedDataset(ds.X, ds.Y, ds.labels, np.asarray(ids, dtype=int))
    return ds, _boundaries(ds.task_ids)


def make_task(cfg):
    """Generate and order a task; returns ``(train, test, boundaries, extras)``."""
    spec = cfg.spec
    if isinstance(spec, Gp1d):
        train, test, curve = gen_gp1d(spec, cfg.seed)
        extras = {"grid": curve[0], "f_star": curve[1]}
    elif isinstance(spec, ClusterClassification):
        train, test = gen_cluster_classification(spec, cfg.seed)
        extras = {}
        if cfg.ordering == "domain_incremental":
            pairings = cfg.pairings or default_pairings(spec.n_classes)
            test = remap_pairs(test, pairings)
    else:
        raise ConfigError(f"task kind {spec.kind!r} does not generate a dataset")
    train, boundaries = order_samples(train, cfg.ordering, cfg.seed, cfg.pairings)
    return train, test, boundaries, extras


def save_dataset(path, train, test, cfg=None):
    """CSV with columns ``split, task_id, label, x_*, y_*`` plus a JSON sidecar."""
    d_x, d_y = train.d_x, train.d_y
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "task_id", "label"] + [f"x_{i}" for i in range(d_x)] + [f"y_{i}" for i in range(d_y)])
        for split, ds in (("train", train), ("test", test)):
            for i in range(ds.n):
                task = "" if ds.task_ids is None else int(ds.task_ids[i])
                label = "" if ds.labels is None else int(ds.labels[i])
                w.writerow([split, task, label] + [repr(float(v)) for v in ds.X[:, i]] + [repr(float(v)) for v in ds.Y[:, i]])
    sidecar = {"d_x": d_x, "d_y": d_y, "task": None if cfg is None else cfg.to_dict()}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_dataset(path):
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    d_x, d_y = meta["d_x"], meta["d_y"]
    rows = {"train": [], "test": []}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rows[row[0]].append(row)

    def build(rs):
        if not rs:
            return OrderedDataset(np.zeros((d_x, 0)), np.zeros((d_y, 0)))
        X = np.array([[float(v) for v in r[3:3 + d_x]] for r in rs]).T
        Y = np.array([[float(v) for v in r[3 + d_x:]] for r in rs]).T
        labels = None if rs[0][2] == "" else np.array([int(r[2]) for r in rs])
        tasks = None if rs[0][1] == "" else np.array([int(r[1]) for r in rs])
        return OrderedDataset(X, Y, labels, tasks)

    cfg = None if meta.get("task") is None else TaskConfig.from_dict(meta["task"])
    return build(rows["train"]), build(rows["test"]), cfg
