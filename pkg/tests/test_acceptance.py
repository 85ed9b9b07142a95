"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line that is repeated in the pytest
terminal summary under "acceptance criteria".
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from _bench import (
    FROZEN,
    FROZEN_ATOL,
    fixture_benchmark,
    fixture_run,
    fixture_sequence,
    random_components,
    random_delta,
    random_model,
    small_task,
)
from tmc import cli
from tmc.continual import run_tmc
from tmc.ensembles import ModelCollection, ensemble_logits
from tmc.io.datasets import Dataset
from tmc.losses import LossSpec, loss_grad, loss_value
from tmc.network import BaseModel, forward, init_model, jvp_forward, mlp_spec, vjp_backward
from tmc.params import ParamVector
from tmc.tangent import TangentModel, compose_many, compose_pair, tangent_forward, unlearn
from tmc.training import adam, default_tangent_config, tangent_dataset_loss, train_tangent


def test_c01_ensemble_composition_identity(verdict):
    t0 = time.perf_counter()
    r = np.random.default_rng(1)
    base = init_model(mlp_spec(16, (32, 32), 10), 3)
    comps = random_components(base, 5, r, sd=0.2)
    x = r.normal(size=(2000, 16))
    worst = 0.0
    for _ in range(10):
        w = r.dirichlet(np.ones(5))
        composed = compose_many(comps, w)
        ens = sum(wi * tangent_forward(c, x) for wi, c in zip(w, comps))
        worst = max(worst, float(np.max(np.abs(tangent_forward(composed, x) - ens))))
    secs = time.perf_counter() - t0
    ok = worst < 1e-10 and secs < 10
    verdict(1, ok, f"max |composed - ensemble| = {worst:.2e} over 2000 samples x 10 weightings, {secs:.2f}s")
    assert ok


def test_c02_jvp_matches_finite_differences(verdict):
    t0 = time.perf_counter()
    r = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        leaky = 0.1 if i % 2 else None
        model = random_model(i, input_dim=int(r.integers(2, 9)), hidden=tuple(r.integers(2, 12, size=r.integers(1, 4))),
                             output_dim=int(r.integers(2, 6)), leaky=leaky)
        delta = random_delta(model, r, 1.0)
        x = r.normal(size=(4, model.spec.input_dim))
        eps = 1e-5 * model.weights.norm() / delta.norm()
        w = model.weights.values
        plus = forward(BaseModel(model.spec, ParamVector(w + eps * delta.values)), x)
        minus = forward(BaseModel(model.spec, ParamVector(w - eps * delta.values)), x)
        fd = (plus - minus) / (2 * eps)
        _, jvp = jvp_forward(model, delta, x)
        rel = np.linalg.norm(jvp - fd) / max(np.linalg.norm(jvp), 1e-12)
        worst = max(worst, float(rel))
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 10
    verdict(2, ok, f"worst relative JVP error {worst:.2e} over 100 triples, {secs:.2f}s")
    assert ok


def test_c03_loss_gradients_and_transpose(verdict):
    r = np.random.default_rng(3)
    specs = [LossSpec("cross_entropy"), LossSpec("mse"), LossSpec("rsl", 1.5, 4.0)]
    worst_rel, worst_t = 0.0, 0.0
    for i in range(100):
        model = random_model(100 + i, input_dim=5, hidden=(6,), output_dim=4, leaky=0.2 if i % 3 == 0 else None)
        delta = random_delta(model, r, 0.3)
        x = r.normal(size=(8, 5))
        y = r.integers(0, 4, size=8)
        spec = specs[i % 3]

        def L(d):
            z = tangent_forward(TangentModel(model, d), x)
            return float(np.mean(loss_value(spec, z, y)))

        z = tangent_forward(TangentModel(model, delta), x)
        grad = vjp_backward(model, x, loss_grad(spec, z, y) / len(x))
        u = random_delta(model, r, 1.0)
        h = 1e-4
        fd = (L(delta + u * h) - L(delta - u * h)) / (2 * h)
        an = grad.dot(u)
        worst_rel = max(worst_rel, abs(an - fd) / max(abs(fd), 1e-12))

        v = r.normal(size=(8, 4))
        _, jv = jvp_forward(model, u, x)
        worst_t = max(worst_t, abs(vjp_backward(model, x, v).dot(u) - float(np.sum(v * jv))))
    ok = worst_rel < 1e-5 and worst_t < 1e-8
    verdict(3, ok, f"worst gradient rel error {worst_rel:.2e}; worst transpose gap {worst_t:.2e}")
    assert ok


def test_c04_jensen_bound(verdict):
    r = np.random.default_rng(4)
    task = small_task(4, num_classes=4, dim=6, per_class=60)
    base = init_model(mlp_spec(6, (12,), 4), 4)
    loss = LossSpec("rsl", 1.0, 5.0)
    cfg = default_tangent_config(epochs=15, batch_size=32, loss=loss, optimizer=adam(1e-2))
    comps = []
    for t, cls in enumerate([(0, 1), (2, 3), (0, 2), (1, 3)]):
        comps.append(train_tangent(base, task.with_classes(cls), replace(cfg, seed=t), task_id=t))
    comp_losses = np.array([tangent_dataset_loss(base, c.delta, task, loss) for c in comps])
    worst = -np.inf
    for _ in range(50):
        k = int(r.integers(2, 5))
        idx = r.choice(len(comps), size=k, replace=False)
        w = r.dirichlet(np.ones(k))
        composed = compose_many([comps[i] for i in idx], w)
        gap = tangent_dataset_loss(base, composed.delta, task, loss) - float(w @ comp_losses[idx])
        worst = max(worst, gap)
    ok = worst <= 1e-9
    verdict(4, ok, f"max(composed loss - weighted component losses) = {worst:.3e} over 50 combinations")
    assert ok


def test_c05_unlearning_oracle(verdict, monkeypatch):
    seq = fixture_sequence("class_incremental")
    base = fixture_benchmark().base
    cfg = default_tangent_config(epochs=3, seed=5)
    res = run_tmc(seq, base, cfg, keep_log=True)
    composed = res.model
    x = np.concatenate([t.test.features for t in seq.tasks])
    records = {rec.task_id: rec for rec in composed.component_log}

    reads = {"n": 0}
    original = Dataset.__getattribute__

    def counting(self, name):
        if name in ("features", "labels"):
            reads["n"] += 1
        return original(self, name)

    worst, argmax_same = 0.0, True
    for i in range(5):
        monkeypatch.setattr(Dataset, "__getattribute__", counting)
        forgotten = unlearn(composed, i, rescale=True)
        monkeypatch.setattr(Dataset, "__getattribute__", original)
        fresh = compose_many([TangentModel(base, records[k].delta, 1) for k in range(5) if k != i])
        a, b = tangent_forward(forgotten, x), tangent_forward(fresh, x)
        worst = max(worst, float(np.max(np.abs(a - b))))
        argmax_same &= bool(np.array_equal(a.argmax(1), b.argmax(1)))
    ok = worst < 1e-10 and argmax_same and reads["n"] == 0
    verdict(5, ok, f"max logit diff {worst:.2e}, argmax identical={argmax_same}, data reads during unlearn={reads['n']}")
    assert ok


def _least_squares_optimum(base, data, beta):
    """Global minimum of the RSL(1, beta) tangent objective via a dense least-squares solve."""
    P, n, K = base.weights.dim, len(data), base.spec.output_dim
    J = np.empty((n * K, P))
    eye = np.eye(P)
    for j in range(P):
        J[:, j] = jvp_forward(base, ParamVector(eye[j]), data.features)[1].reshape(-1)
    target = np.zeros((n, K))
    target[np.arange(n), data.labels] = beta
    resid = (target - forward(base, data.features)).reshape(-1)
    sol, *_ = np.linalg.lstsq(J, resid, rcond=None)
    return tangent_dataset_loss(base, ParamVector(sol), data, LossSpec("rsl", 1.0, beta))


def test_c06_convex_training_equivalence(verdict):
    task = small_task(6, num_classes=3, dim=6, per_class=100)
    base = init_model(mlp_spec(6, (8,), 3), 0)
    loss = LossSpec("rsl", 1.0, 1.0)
    cfg = default_tangent_config(epochs=1500, batch_size=len(task), loss=loss,
                                 optimizer=adam(5e-2, schedule=((1000, 0.1), (1300, 0.1))))
    a = train_tangent(base, task, cfg)
    init = ParamVector(np.random.default_rng(1).normal(0, 0.5, base.weights.dim))
    b = train_tangent(base, task, cfg, init=init)
    la, lb = (tangent_dataset_loss(base, m.delta, task, loss) for m in (a, b))
    optimum = _least_squares_optimum(base, task, 1.0)

    seq = fixture_sequence("class_incremental")
    fb = fixture_benchmark().base
    pcfg = default_tangent_config(epochs=2, seed=11)
    serial = run_tmc(seq, fb, pcfg).model.delta.values
    parallel = run_tmc(seq, fb, pcfg, parallel=True, jobs=4).model.delta.values
    identical = serial.tobytes() == parallel.tobytes()

    ok = abs(la - lb) < 1e-3 and identical
    verdict(6, ok, f"|loss(init 0) - loss(init random)| = {abs(la - lb):.2e} "
                   f"(least-squares optimum {optimum:.6f}, runs {la:.6f}/{lb:.6f}); parallel == sequential bitwise: {identical}")
    assert ok


def test_c07_forgetting_demonstration(verdict):
    t0 = time.perf_counter()
    tmc = fixture_run("class_incremental", "tmc", 25.0)
    naive = fixture_run("class_incremental", "naive_seq")
    secs = time.perf_counter() - t0
    frozen_ok = (abs(tmc - FROZEN[("class_incremental", "tmc", 25.0)]) <= FROZEN_ATOL
                 and abs(naive - FROZEN[("class_incremental", "naive_seq", None)]) <= FROZEN_ATOL)
    ok = tmc - naive >= 0.15 and secs < 300 and frozen_ok
    verdict(7, ok, f"TMC {tmc:.3f} vs naive sequential {naive:.3f} (+{100 * (tmc - naive):.1f} pt), "
                   f"matches frozen fixture: {frozen_ok}, {secs:.1f}s")
    assert ok


def test_c08_beta_direction(verdict):
    ci25, ci1 = fixture_run("class_incremental", "tmc", 25.0), fixture_run("class_incremental", "tmc", 1.0)
    di5, di25 = fixture_run("data_incremental", "tmc", 5.0), fixture_run("data_incremental", "tmc", 25.0)
    frozen_ok = all(abs(fixture_run(p, "tmc", b) - FROZEN[(p, "tmc", b)]) <= FROZEN_ATOL
                    for p, b in [("class_incremental", 25.0), ("class_incremental", 1.0),
                                 ("data_incremental", 5.0), ("data_incremental", 25.0)])
    ok = ci25 >= ci1 and di5 >= di25 and frozen_ok
    verdict(8, ok, f"class-IL beta=25 {ci25:.3f} >= beta=1 {ci1:.3f}; data-IL beta=5 {di5:.3f} >= beta=25 {di25:.3f}; "
                   f"frozen: {frozen_ok}")
    assert ok


def test_c09_tmc_vs_sequential_init(verdict):
    ci_tmc, ci_seq = fixture_run("class_incremental", "tmc", 25.0), fixture_run("class_incremental", "tmc_seq", 25.0)
    di_tmc, di_seq = fixture_run("data_incremental", "tmc", 5.0), fixture_run("data_incremental", "tmc_seq", 5.0)
    frozen_ok = (abs(ci_seq - FROZEN[("class_incremental", "tmc_seq", 25.0)]) <= FROZEN_ATOL
                 and abs(di_seq - FROZEN[("data_incremental", "tmc_seq", 5.0)]) <= FROZEN_ATOL)
    ok = ci_tmc >= ci_seq and di_seq >= di_tmc - 0.01 and frozen_ok
    verdict(9, ok, f"class-IL TMC {ci_tmc:.3f} >= TMC-Seq {ci_seq:.3f}; data-IL TMC-Seq {di_seq:.3f} >= TMC {di_tmc:.3f} - 1pt; "
                   f"frozen: {frozen_ok}")
    assert ok


def _interleaved_medians(fns, x, batches=200):
    times = np.empty((len(fns), batches))
    for f in fns:
        f(x)
    for i in range(batches):
        for k, f in enumerate(fns):
            t0 = time.perf_counter()
            f(x)
            times[k, i] = time.perf_counter() - t0
    return np.median(times, axis=1) / len(x)


def test_c10_constant_inference_cost(verdict):
    r = np.random.default_rng(10)
    base = fixture_benchmark().base
    comps = random_components(base, 20, r)
    one, twenty = compose_many(comps[:1]), compose_pair(compose_many(comps[:19]), comps[19])
    ens1, ens10 = ModelCollection.uniform(comps[:1]), ModelCollection.uniform(comps[:10])
    x = r.normal(size=(256, base.spec.input_dim))
    t1, t20, e1, e10 = _interleaved_medians([
        lambda v: tangent_forward(one, v),
        lambda v: tangent_forward(twenty, v),
        lambda v: ensemble_logits(ens1, v),
        lambda v: ensemble_logits(ens10, v),
    ], x)
    ok = t20 <= 1.2 * t1 and e10 >= 5 * e1
    verdict(10, ok, f"composed T=20/T=1 latency {t20 / t1:.2f}x (<= 1.2); ensemble T=10/T=1 {e10 / e1:.2f}x (>= 5); "
                    f"median of 200 batches of 256")
    assert ok


def test_c11_rsl_reduces_to_mse(verdict):
    r = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        K = int(r.integers(2, 20))
        n = int(r.integers(1, 30))
        z = r.normal(scale=3.0, size=(n, K))
        y = r.integers(0, K, size=n)
        a = loss_value(LossSpec("rsl", 1.0, 1.0), z, y)
        b = loss_value(LossSpec("mse"), z, y)
        worst = max(worst, float(np.max(np.abs(a - b))))
    ok = worst <= 1e-15
    verdict(11, ok, f"max |rsl(1,1) - mse| = {worst:.2e} over 100 instances")
    assert ok


def test_c12_end_to_end_determinism(verdict, tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text("""{
      "name": "determinism",
      "dataset": {"synthetic": {"kind": "gaussian_mixture", "num_classes": 6, "dim": 12,
                                "samples_per_class": 60, "noise": 1.0, "separation": 5.0}},
      "pretrain": {"classes": 6, "epochs": 3, "hidden": [16]},
      "protocols": ["class_incremental", "data_incremental"],
      "num_tasks": 3,
      "methods": ["tmc", "tmc_seq", "naive_seq", "ens_logit"],
      "seeds": [0, 1],
      "tangent": {"epochs": 2},
      "nonlinear": {"epochs": 2}
    }""")
    outputs = []
    for run, jobs in (("a", "1"), ("b", "3")):
        code = cli.main(["run-experiment", str(cfg), "--seed", "4", "--jobs", jobs, "--out", str(tmp_path / run)])
        assert code == 0
        outputs.append((tmp_path / run / "results.csv").read_bytes())
    ok = outputs[0] == outputs[1] and len(outputs[0].splitlines()) == 1 + 2 * 4
    verdict(12, ok, f"two runs (jobs=1, jobs=3) byte-identical: {outputs[0] == outputs[1]} ({len(outputs[0])} bytes)")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
