from dataclasses import replace

import numpy as np
import pytest

from _bench import fixture_benchmark, fixture_sequence
from tmc.continual import (
    BenchmarkSpec,
    RunResult,
    demo_unlearn,
    make_benchmark,
    make_sequence,
    run_baseline,
    run_method,
    run_tmc,
    run_tmc_seq,
    split_class_incremental,
    split_data_incremental,
    split_task_incremental,
    task_seed,
    unlearn_all,
)
from tmc.ensembles import ModelCollection, ensemble_softmax, evaluate
from tmc.io.datasets import Dataset, SyntheticParams
from tmc.network import init_model, mlp_spec
from tmc.tangent import TangentModel, tangent_forward
from tmc.training import default_nonlinear_config, default_tangent_config, train_tangent


def toy(num_classes=4, per_class=5):
    labels = np.repeat(np.arange(num_classes), per_class)
    feats = np.random.default_rng(0).normal(size=(labels.size, 3))
    return Dataset(feats, labels, num_classes)


class TestSplits:
    def test_class_incremental_partition(self):
        seq = split_class_incremental(toy(), 2, seed=0)
        a, b = (set(t.classes) for t in seq.tasks)
        assert len(a) == len(b) == 2 and a.isdisjoint(b) and a | b == {0, 1, 2, 3}
        for t in seq.tasks:
            assert set(np.unique(t.train.labels)) == set(t.classes)

    def test_one_class_per_task(self):
        seq = split_class_incremental(toy(), 4, seed=1)
        assert [len(t.classes) for t in seq.tasks] == [1, 1, 1, 1]

    def test_split_is_seeded(self):
        a = split_class_incremental(toy(), 2, seed=3)
        b = split_class_incremental(toy(), 2, seed=3)
        assert [t.classes for t in a.tasks] == [t.classes for t in b.tasks]

    def test_too_many_tasks(self):
        with pytest.raises(ValueError):
            split_class_incremental(toy(), 5, seed=0)

    def test_data_incremental_shards(self):
        d = Dataset(np.arange(20, dtype=float).reshape(10, 2), np.array([0, 1] * 5), 2)
        seq = split_data_incremental(d, 2, seed=0)
        sizes = [len(t.train) for t in seq.tasks]
        assert sizes == [5, 5]
        rows = np.concatenate([t.train.features[:, 0] for t in seq.tasks])
        assert sorted(rows) == list(range(0, 20, 2))

    def test_task_incremental_is_restricted(self):
        seq = split_task_incremental(toy(), 2, seed=0)
        assert seq.restricted and not split_class_incremental(toy(), 2, seed=0).restricted

    def test_make_sequence_unknown_protocol(self):
        with pytest.raises(ValueError):
            make_sequence("domain_incremental", toy(), 2, 0)

    def test_task_seed_distinct_and_stable(self):
        seeds = [task_seed(0, t) for t in range(10)]
        assert len(set(seeds)) == 10 and seeds == [task_seed(0, t) for t in range(10)]


@pytest.fixture(scope="module")
def small_bench():
    spec = BenchmarkSpec(SyntheticParams(num_classes=6, dim=10, samples_per_class=60, separation=5.0),
                         pretrain_classes=6, hidden=(16,), pretrain_epochs=5)
    return make_benchmark(spec, 0)


@pytest.fixture(scope="module")
def small_seq(small_bench):
    return make_sequence("class_incremental", small_bench.train, 3, 0, small_bench.test)


CFG = default_tangent_config(epochs=3, seed=2)


class TestBenchmark:
    def test_deterministic(self, small_bench):
        spec = BenchmarkSpec(SyntheticParams(num_classes=6, dim=10, samples_per_class=60, separation=5.0),
                             pretrain_classes=6, hidden=(16,), pretrain_epochs=5)
        again = make_benchmark(spec, 0)
        assert again.base.fingerprint == small_bench.base.fingerprint
        np.testing.assert_array_equal(again.train.features, small_bench.train.features)

    def test_samples_split(self):
        spec = BenchmarkSpec(SyntheticParams(num_classes=4, dim=5, samples_per_class=40), pretrain_split="samples",
                             hidden=(8,), pretrain_epochs=2)
        b = make_benchmark(spec, 1)
        assert b.base.spec.output_dim == 4 and len(b.train) + len(b.test) == 80


class TestRunTmc:
    def test_single_task_equals_component(self, small_bench, small_seq):
        one = replace(small_seq, tasks=small_seq.tasks[:1])
        res = run_tmc(one, small_bench.base, CFG)
        seq_res = run_tmc_seq(one, small_bench.base, CFG)
        assert res.model.delta == seq_res.model.delta
        assert res.composed_accuracies == res.component_accuracies

    def test_parallel_is_bit_identical(self, small_bench, small_seq):
        a = run_tmc(small_seq, small_bench.base, CFG)
        b = run_tmc(small_seq, small_bench.base, CFG, parallel=True, jobs=3)
        assert a.model.delta.values.tobytes() == b.model.delta.values.tobytes()
        assert a.composed_accuracies == b.composed_accuracies

    def test_result_shape(self, small_bench, small_seq):
        res = run_tmc(small_seq, small_bench.base, CFG)
        assert isinstance(res, RunResult) and res.method == "tmc"
        assert len(res.composed_accuracies) == len(res.component_accuracies) == 3
        assert sorted(res.history) == [0, 1, 2] and len(res.history[0]) == CFG.epochs

    def test_holds_at_most_two_deltas(self, small_bench, small_seq):
        assert run_tmc(small_seq, small_bench.base, CFG).peak_live_deltas <= 2

    def test_head_width_must_match(self, small_seq):
        wrong = init_model(mlp_spec(10, (4,), 3), 0)
        with pytest.raises(ValueError):
            run_tmc(small_seq, wrong, CFG)


class TestBaselines:
    def test_tme_is_softmax_ensemble_of_components(self, small_bench, small_seq):
        res = run_baseline(small_seq, small_bench.base, CFG, "tme")
        comps = [train_tangent(small_bench.base, t.train, replace(CFG, seed=task_seed(CFG.seed, i)))
                 for i, t in enumerate(small_seq.tasks)]
        x = small_bench.test.features
        np.testing.assert_allclose(res.model(x), ensemble_softmax(ModelCollection.uniform(comps), x), atol=1e-12)

    def test_tmc_fc_touches_only_head(self, small_bench, small_seq):
        res = run_baseline(small_seq, small_bench.base, CFG, "tmc_fc")
        sl = small_bench.base.spec.head_slice()
        body = np.ones(small_bench.base.weights.dim, bool)
        body[sl] = False
        assert res.method == "tmc_fc" and np.all(res.model.delta.values[body] == 0)

    @pytest.mark.parametrize("method", ["soup", "ens_logit", "ens_softmax", "naive_seq"])
    def test_nonlinear_baselines_run(self, small_bench, small_seq, method):
        res = run_method(method, small_seq, small_bench.base, default_nonlinear_config(epochs=2))
        assert res.method == method and 0.0 <= res.final_accuracy <= 1.0

    def test_unknown_method(self, small_bench, small_seq):
        with pytest.raises(ValueError):
            run_baseline(small_seq, small_bench.base, CFG, "tmc")

    def test_naive_sequential_forgets_first_task(self):
        b = fixture_benchmark()
        seq = replace(fixture_sequence("class_incremental"), tasks=fixture_sequence("class_incremental").tasks[:2])
        res = run_baseline(seq, b.base, default_nonlinear_config(epochs=50), "naive_seq")
        first = seq.tasks[0].test
        assert res.component_accuracies[0] > 0.9
        assert evaluate(res.model, first) < 0.1


class TestUnlearnDemo:
    def test_reports_match_recomposition(self, small_bench, small_seq):
        res = run_tmc(small_seq, small_bench.base, CFG, keep_log=True)
        for rep in demo_unlearn(small_seq, res):
            assert rep.max_logit_diff < 1e-10 and rep.argmax_identical
            assert rep.remaining_accuracy == rep.fresh_remaining_accuracy

    def test_unlearn_all_returns_to_anchor(self, small_bench, small_seq):
        res = run_tmc(small_seq, small_bench.base, CFG, keep_log=True)
        out = unlearn_all(res.model)
        assert np.max(np.abs(out.delta.values)) < 1e-12
        np.testing.assert_allclose(tangent_forward(out, small_bench.test.features),
                                   tangent_forward(TangentModel.at_anchor(small_bench.base), small_bench.test.features),
                                   atol=1e-10)

    def test_needs_log(self, small_bench, small_seq):
        with pytest.raises(ValueError):
            demo_unlearn(small_seq, run_tmc(small_seq, small_bench.base, CFG))
