import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from targetcorr.errors import ConfigError
from targetcorr.harness import (
    CURVE_COLUMNS,
    CurveRecord,
    ExperimentConfig,
    ExperimentError,
    build_kernel,
    equivalence_report,
    export_curves,
    fit_predictor,
    import_curves,
    load_config,
    run_experiment,
    sgd_closed_form_deviation,
    summarize,
)
from targetcorr.kernels import RBF, RandomFeatureTanh, gram
from targetcorr.regression import HyperParams, offline_predict
from targetcorr.tasks import ClusterClassification, Gp1d, TaskConfig, gen_random_feature_map

SMALL_CLUSTERS = TaskConfig(ClusterClassification(n_classes=4, d_x=4, n_train=64, n_test=32), "class_incremental")


def _final(records, tag, seed=0):
    return max((r for r in records if r.learner == tag and r.seed == seed), key=lambda r: r.step)


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig(
            task=SMALL_CLUSTERS,
            learners=("offline", {"kind": "sgd_mlp", "hidden": [8], "correction": "none"}),
            hp=HyperParams(eta=0.2, gamma=0.5, b=4),
            seeds=(3, 4),
            grid={"eta": (0.1, 0.2)},
        )
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()

    @pytest.mark.parametrize(
        "d",
        [
            {"seed": 1},
            {"hp": {"eta": 0.1, "lr": 0.2}},
            {"mlp": {"depth": 2}},
            {"learners": ["online_magic"]},
            {"learners": [{"kind": "offline", "hidden": [4]}]},
            {"learners": ["offline", "offline"]},
            {"grid": {"lr": [0.1]}},
            {"kernel": {"kind": "rbf", "width": 1.0}},
            {"hp": {"eta": -1.0}},
            {"mlp": {"activation": "gelu"}},
            {"seeds": []},
        ],
    )
    def test_rejects_invalid(self, d):
        with pytest.raises(ConfigError):
            cfg = ExperimentConfig.from_dict(d)
            build_kernel(cfg.kernel, 1)

    def test_mlp_learner_tags(self):
        cfg = ExperimentConfig(learners=("sgd_mlp", {"kind": "sgd_mlp", "correction": "none"}))
        assert [s.tag for s in cfg.learner_specs()] == ["sgd_mlp:iterative:per_task", "sgd_mlp:none:per_task"]

    def test_load_bad_json(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(p)


class TestBuildKernel:
    def test_rbf(self):
        k = build_kernel({"kind": "rbf", "bandwidth": 0.3}, 1)
        assert isinstance(k, RBF) and k.bandwidth == 0.3

    def test_random_features_seeded(self):
        a = build_kernel({"kind": "random_feature_tanh", "d_J": 20}, 2, seed=5)
        assert isinstance(a, RandomFeatureTanh) and a.J.shape == (20, 2)
        np.testing.assert_array_equal(a.J, gen_random_feature_map(20, 2, 5).J)

    def test_linear(self, rng):
        X = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(gram(build_kernel({"kind": "linear"}, 3), X), X.T @ X)


class TestCurves:
    def test_offline_is_flat(self):
        recs = run_experiment(ExperimentConfig(learners=("offline",))).records
        assert [r.step for r in recs] == [16, 32, 40]
        assert len({r.test_mse for r in recs}) == 1

    def test_corrected_matches_offline(self, gp_task):
        seeds = tuple(range(20))
        res = run_experiment(ExperimentConfig(learners=("offline", "online_true", "online_corrected"), seeds=seeds))
        for seed in seeds:
            off, cor = (_final(res.records, t, seed).test_mse for t in ("offline", "online_corrected"))
            assert abs(cor - off) < 1e-8
        # the ordering is an average-case property; single seeds can invert it
        mean = {t: res.summary[t]["test_mse"]["mean"] for t in res.summary}
        assert mean["online_true"] >= mean["offline"] and mean["online_true"] >= mean["online_corrected"]
        off = _final(res.records, "offline").test_mse
        train, test, _ = gp_task
        pred = offline_predict(RBF(0.1), train.X, train.Y, 1.0, test.X)
        assert off == pytest.approx(np.mean((pred - test.Y) ** 2), abs=1e-12)

    def test_replay_ends_at_offline(self):
        res = run_experiment(ExperimentConfig(learners=("offline", "cumulative_replay")))
        assert _final(res.records, "cumulative_replay").test_mse == pytest.approx(_final(res.records, "offline").test_mse, abs=1e-10)

    def test_iterative_curve(self):
        cfg = ExperimentConfig(task=SMALL_CLUSTERS, kernel={"kind": "rbf", "bandwidth": 1.0}, learners=("online_iter_corrected",), hp=HyperParams(b=4))
        recs = run_experiment(cfg).records
        assert [r.step for r in recs] == [16]
        assert recs[0].test_accuracy is not None

    def test_steps_increase_per_learner(self):
        cfg = ExperimentConfig(task=SMALL_CLUSTERS, kernel={"kind": "rbf", "bandwidth": 1.0}, learners=("online_true", "online_iter_corrected"), eval_every=3, seeds=(0, 1))
        recs = run_experiment(cfg).records
        for key in {(r.seed, r.learner) for r in recs}:
            steps = [r.step for r in recs if (r.seed, r.learner) == key]
            assert steps == sorted(set(steps)) and steps[-1] == 64

    def test_mlp_learner(self):
        cfg = ExperimentConfig(task=SMALL_CLUSTERS, learners=({"kind": "sgd_mlp", "hidden": [8], "chunk": 8},), hp=HyperParams(eta=0.05, b=4))
        recs = run_experiment(cfg).records
        assert recs[-1].step == 16 and recs[-1].learner == "sgd_mlp:iterative:per_task"

    def test_grid_tags(self):
        cfg = ExperimentConfig(learners=("online_true",), grid={"eta": (0.1, 0.5)})
        assert {r.learner for r in run_experiment(cfg).records} == {"online_true@eta=0.1", "online_true@eta=0.5"}

    def test_error_carries_seed(self):
        cfg = ExperimentConfig(learners=("offline",), kernel={"kind": "rbf", "bandwidth": 1e6}, hp=HyperParams(gamma=0.0), seeds=(7,))
        with pytest.raises(ExperimentError) as info:
            run_experiment(cfg)
        assert info.value.seed == 7 and "seed=7" in str(info.value) and info.value.learner == "offline"

    def test_workers_do_not_change_results(self):
        cfg = ExperimentConfig(learners=("online_true", "offline"), seeds=(0, 1, 2))
        assert run_experiment(cfg).records == run_experiment(replace(cfg, workers=2)).records

    def test_fit_predictor_corrected(self, gp_task):
        train, test, _ = gp_task
        hp = HyperParams()
        on = fit_predictor("online_corrected", RBF(0.1), train, hp)(test.X)
        off = fit_predictor("offline", RBF(0.1), train, hp)(test.X)
        assert np.max(np.abs(on - off)) < 1e-8
        with pytest.raises(ConfigError):
            fit_predictor("sgd_mlp", RBF(0.1), train, hp)


class TestExport:
    def _records(self):
        cfg = ExperimentConfig(learners=("offline", "online_true"), seeds=(0, 1))
        return run_experiment(cfg).records

    def test_cardinality_and_columns(self, tmp_path):
        path = tmp_path / "c.csv"
        export_curves(self._records(), path)
        rows = list(csv.reader(path.open()))
        assert tuple(rows[0]) == CURVE_COLUMNS
        assert len(rows) == 13
        assert all(r[5] == "" for r in rows[1:])

    @pytest.mark.parametrize("fmt", ["csv", "json"])
    def test_round_trip(self, tmp_path, fmt):
        recs = self._records()
        path = tmp_path / f"c.{fmt}"
        export_curves(recs, path, fmt)
        assert import_curves(path) == recs

    def test_json_null_accuracy(self, tmp_path):
        path = tmp_path / "c.json"
        export_curves(self._records(), path, "json")
        assert json.loads(path.read_text())[0]["test_accuracy"] is None

    def test_bytes_stable(self, tmp_path):
        export_curves(self._records(), tmp_path / "a.csv")
        export_curves(self._records(), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_empty_and_bad_format(self, tmp_path):
        with pytest.raises(Exception):
            export_curves([], tmp_path / "x.csv")
        with pytest.raises(ConfigError):
            export_curves(self._records(), tmp_path / "x.xml", "xml")


class TestSummary:
    def test_sem(self):
        recs = [CurveRecord(s, 10, "a", 0.0, v) for s, v in enumerate([1.0, 2.0, 4.0])]
        recs.append(CurveRecord(0, 5, "a", 0.0, 100.0))
        m = summarize(recs)["a"]["test_mse"]
        assert m["mean"] == pytest.approx(7 / 3)
        assert m["sem"] == pytest.approx(np.std([1, 2, 4], ddof=1) / np.sqrt(3))

    def test_single_seed_has_no_sem(self):
        assert summarize([CurveRecord(0, 1, "a", 1.0, 1.0)])["a"]["test_mse"]["sem"] is None
        assert summarize([CurveRecord(0, 1, "a", 1.0, 1.0)])["a"]["test_accuracy"] is None


class TestEquivalenceReport:
    def test_gp_defaults_pass(self):
        report = equivalence_report(TaskConfig(), HyperParams(eta=0.5, gamma=1.0))
        assert report.passed, "\n".join(report.lines())
        assert len(report.checks) == 11

    def test_single_sample(self):
        report = equivalence_report(TaskConfig(Gp1d(n_train=1, n_test=5)), HyperParams())
        assert report.passed, "\n".join(report.lines())

    def test_degenerate_decay_surfaces(self):
        report = equivalence_report(TaskConfig(), HyperParams(eta=0.5, gamma=2.0))
        assert not report.passed and report.numerical_failure
        bad = [c for c in report.failures]
        assert len(bad) == 1 and "gamma=2" in bad[0].name and "DegenerateDecayError" in bad[0].error
        assert "violated" in report.lines()[-1]

    def test_divergent_sgd_uses_extended_precision(self, gp_task, tanh_kernel):
        train, test, _ = gp_task
        dev, note = sgd_closed_form_deviation(tanh_kernel, train, test, 0.5)
        assert dev < 1e-8 and "512-bit" in note
        dev, note = sgd_closed_form_deviation(tanh_kernel, train, test, 0.01)
        assert dev < 1e-8 and note == "float64"

    def test_to_dict(self):
        d = equivalence_report(TaskConfig(Gp1d(n_train=8, n_test=8)), HyperParams(eta=0.1)).to_dict()
        assert d["passed"] and all(c["passed"] for c in d["checks"])


def _draws(count, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        eta, gamma = rng.uniform(0.01, 0.9), rng.uniform(0.01, 3.0)
        if abs(eta * gamma - 1.0) > 1e-3:
            out.append((float(eta), float(gamma)))
    return out


@pytest.mark.parametrize(
    "task",
    [TaskConfig(), TaskConfig(ClusterClassification(), "class_incremental")],
    ids=["gp1d", "clusters"],
)
def test_report_passes_on_random_draws(task):
    failures = []
    for eta, gamma in _draws(20, seed=2024):
        report = equivalence_report(task, HyperParams(eta=eta, gamma=gamma))
        if not report.passed:
            failures.append(f"eta={eta:.4f} gamma={gamma:.4f}: " + report.lines()[-1])
    assert not failures, "\n".join(failures)
