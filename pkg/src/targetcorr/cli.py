"""Command-line entry point.

    targetcorr gen       --config cfg.json --out DIR
    targetcorr fit       --config cfg.json --out DIR [--learner NAME] [--dump-coeffs]
    targetcorr report    --config cfg.json [--out DIR]
    targetcorr curve     --config cfg.json --out DIR [--seeds K] [--format csv|json]
    targetcorr ntk-train --config cfg.json --out DIR

Exit codes: 0 success, 1 usage/config error, 2 equivalence failure,
3 numerical failure.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

from .correction import IterativeCorrector
from .errors import ConfigError, NumericalError, TargetCorrError
from .harness import (
    LEARNERS,
    ExperimentConfig,
    ExperimentError,
    build_kernel,
    equivalence_report,
    export_curves,
    fit_predictor,
    load_config,
    run_experiment,
)
from .kernels import save_matrix
from .ntk import MlpSpec, train_corrected
from .tasks import make_task, save_dataset

EXIT_OK, EXIT_USAGE, EXIT_EQUIVALENCE, EXIT_NUMERICAL = 0, 1, 2, 3
TRACE_COLUMNS = ("step", "task_id", "epoch", "train_mse", "test_mse", "test_accuracy")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _set_path(d, dotted, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"--set {dotted}: {k} is not an object")
    d[keys[-1]] = value


def resolve_config(args):
    """Config file (or defaults) with ``--set`` overrides and seed flags applied."""
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.set:
        d = cfg.to_dict()
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            _set_path(d, key, value)
        cfg = ExperimentConfig.from_dict(d)
    if args.seed is not None or args.seeds is not None:
        start = cfg.seeds[0] if args.seed is None else args.seed
        count = 1 if args.seeds is None else args.seeds
        if count < 1:
            raise ConfigError("--seeds must be >= 1")
        cfg = replace(cfg, seeds=tuple(range(start, start + count)))
    return cfg


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen(args, cfg):
    for seed in cfg.seeds:
        task = replace(cfg.task, seed=seed)
        train, test, boundaries, _ = make_task(task)
        name = "dataset.csv" if len(cfg.seeds) == 1 else f"dataset_seed{seed}.csv"
        path = _out(args, name)
        save_dataset(path, train, test, task)
        print(f"wrote {path} ({train.n} train, {test.n} test, task starts {boundaries[:-1]})")
    return EXIT_OK


def _write_curves(args, result, stem="curves"):
    path = _out(args, f"{stem}.{args.format}")
    export_curves(result.records, path, args.format)
    _write_json(_out(args, "summary.json"), result.summary)
    print(f"wrote {path} ({len(result.records)} records)")
    for tag, entry in result.summary.items():
        parts = []
        for metric in ("test_mse", "test_accuracy"):
            m = entry[metric]
            if m is not None:
                sem = "" if m["sem"] is None else f" +- {m['sem']:.4g}"
                parts.append(f"{metric} {m['mean']:.6g}{sem}")
        print(f"  {tag:<32s} " + ", ".join(parts))


def cmd_fit(args, cfg):
    learner = args.learner or (cfg.learners[0] if len(cfg.learners) else None)
    if learner is None:
        raise ConfigError("no learner selected")
    cfg = replace(cfg, learners=(learner,))
    result = run_experiment(cfg)
    _write_curves(args, result)
    spec = cfg.learner_specs()[0]
    seed = cfg.seeds[0]
    train, _, _, _ = make_task(replace(cfg.task, seed=seed))
    kernel = build_kernel(cfg.kernel, train.d_x, seed)
    hp = replace(cfg.hp, seed=seed)
    if spec.kind != "sgd_mlp":
        pred = fit_predictor(spec.kind, kernel, train, hp, cfg.correction_chunk)
        save_matrix(_out(args, "coef.csv"), pred.coef)
        _write_json(_out(args, "predictor.json"), pred.descriptor("dataset.csv", "coef.csv"))
    if args.dump_coeffs:
        corrector = IterativeCorrector(kernel, hp, train.d_x, train.d_y, keep_records=True)
        corrector.run(train.X, train.Y, cfg.correction_chunk)
        for i, r in enumerate(corrector.records):
            save_matrix(_out(args, f"coeffs_chunk{i:03d}_C_on.csv"), r.coeffs.C_on)
            save_matrix(_out(args, f"coeffs_chunk{i:03d}_C_off.csv"), r.coeffs.C_off)
        print(f"dumped C_on/C_off for {len(corrector.records)} chunks")
    return EXIT_OK


def cmd_report(args, cfg):
    status = EXIT_OK
    out = {}
    for seed in cfg.seeds:
        task = replace(cfg.task, seed=seed)
        train, _, _, _ = make_task(task)
        kernel = build_kernel(cfg.kernel, train.d_x, seed)
        sgd_kernel = kernel if kernel.has_features else None
        report = equivalence_report(task, replace(cfg.hp, seed=seed), kernel, sgd_kernel, cfg.correction_chunk)
        print(f"seed {seed}:")
        for line in report.lines():
            print("  " + line)
        out[str(seed)] = report.to_dict()
        if not report.passed:
            status = max(status, EXIT_NUMERICAL if report.numerical_failure else EXIT_EQUIVALENCE)
    if args.out:
        _write_json(_out(args, "report.json"), out)
    return status


def cmd_curve(args, cfg):
    _write_curves(args, run_experiment(cfg))
    return EXIT_OK


def _fmt(v):
    return "" if v is None else repr(float(v))


def cmd_ntk_train(args, cfg):
    specs = [s for s in cfg.learner_specs() if s.kind == "sgd_mlp"]
    if not specs:
        specs = [s for s in ExperimentConfig(mlp=cfg.mlp, learners=("sgd_mlp",)).learner_specs()]
    for seed in cfg.seeds:
        train, test, boundaries, _ = make_task(replace(cfg.task, seed=seed))
        hp = replace(cfg.hp, seed=seed)
        for spec in specs:
            m = spec.mlp
            net = MlpSpec((train.d_x, *m.hidden, train.d_y), m.activation)
            try:
                res = train_corrected(
                    net, train, hp, m.schedule, m.correction, boundaries, test,
                    m.chunk, m.epochs, cfg.eval_every, ntk_mode=m.ntk_mode,
                )
            except TargetCorrError as exc:
                raise ExperimentError(f"seed={seed}, learner={spec.tag}: {exc}", seed, None, spec.tag, exc) from exc
            tag = spec.tag.replace(":", "_")
            path = _out(args, f"trace_{tag}_seed{seed}.csv")
            with open(path, "w", newline="") as fh:
                fh.write(",".join(TRACE_COLUMNS) + "\n")
                for r in res.trace:
                    fh.write(f"{r['step']},{r['task_id']},{r['epoch']},{_fmt(r['train_mse'])},{_fmt(r['test_mse'])},{_fmt(r['test_accuracy'])}\n")
            last = res.trace[-1]
            acc = "" if last["test_accuracy"] is None else f", test_accuracy {last['test_accuracy']:.4f}"
            print(f"wrote {path}: final test_mse {last['test_mse']:.6g}{acc}")
    return EXIT_OK


HELP = {
    "gen": "generate a task and write it to disk",
    "fit": "fit one learner and write its curve and predictor",
    "report": "run the equivalence identities (exit 2 on failure)",
    "curve": "multi-learner learning curves over seeds",
    "ntk-train": "MLP training with empirical-NTK target correction",
}
COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "report": cmd_report, "curve": cmd_curve, "ntk-train": cmd_ntk_train}


def build_parser():
    p = _Parser(prog="targetcorr", description="Online/offline kernel regression with target correction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", metavar="PATH", help="JSON experiment config (defaults when omitted)")
        sp.add_argument("--out", metavar="DIR", default=None if name == "report" else ".", help="output directory")
        sp.add_argument("--seeds", type=int, metavar="K", help="run K consecutive seeds")
        sp.add_argument("--seed", type=int, metavar="S", help="first seed (expands with --seeds)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv", help="curve export format")
        sp.add_argument("--dump-coeffs", action="store_true", help="write per-chunk C_on/C_off matrices (fit)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. hp.eta=0.1")
        if name == "fit":
            sp.add_argument("--learner", choices=LEARNERS, help="learner to fit (default: first in config)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.learner = getattr(args, "learner", None)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc.cause, NumericalError) else EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (TargetCorrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
