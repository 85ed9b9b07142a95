"""Continual fine-tuning protocols and drivers.

Builds class-, data- and task-incremental task sequences, then runs tangent
model composition (parallel or sequential), its sequential-init variant, and
the composition / naive fine-tuning baselines, evaluating after every task.
"""

from __future__ import annotations

import logging
import time
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .ensembles import ModelCollection, as_predictor, evaluate, soup
from .io.datasets import DataError, Dataset, SyntheticParams, generate_synthetic, train_test_split
from .network import BaseModel, init_model, mlp_spec, reinit_head
from .tangent import TangentModel, compose_many, compose_pair, tangent_forward, unlearn
from .training import TrainConfig, default_nonlinear_config, sgd, train_nonlinear, train_tangent

log = logging.getLogger(__name__)

PROTOCOLS = ("class_incremental", "data_incremental", "task_incremental")
METHODS = ("tmc", "tmc_seq", "tme", "soup", "ens_logit", "ens_softmax", "tmc_fc", "naive_seq")
BASELINES = ("naive_seq", "soup", "ens_logit", "ens_softmax", "tme", "tmc_fc")


@dataclass
class Task:
    train: Dataset
    test: Dataset
    classes: tuple


@dataclass
class TaskSequence:
    protocol: str
    tasks: List[Task]
    num_classes: int
    split_seed: int

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "data_incremental":
            full = tuple(range(self.num_classes))
            if any(t.classes != full for t in self.tasks):
                raise ValueError("data-incremental tasks must all cover the full label space")
        else:
            seen = set()
            for t in self.tasks:
                if seen & set(t.classes):
                    raise ValueError("class subsets of class/task-incremental tasks must be disjoint")
                seen |= set(t.classes)
                for part in (t.train, t.test):
                    if len(part) and not set(part.classes_present()) <= set(t.classes):
                        raise ValueError("task samples carry labels outside the task's class subset")

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def restricted(self) -> bool:
        return self.protocol == "task_incremental"


def task_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def _class_groups(num_classes: int, num_tasks: int, seed: int) -> List[tuple]:
    if num_tasks < 1:
        raise ValueError("need at least one task")
    if num_tasks > num_classes:
        raise ValueError(f"cannot split {num_classes} classes into {num_tasks} tasks")
    order = np.random.default_rng(seed).permutation(num_classes)
    return [tuple(sorted(int(c) for c in g)) for g in np.array_split(order, num_tasks)]


def split_class_incremental(train: Dataset, num_tasks: int, seed: int, test: Optional[Dataset] = None,
                            protocol: str = "class_incremental") -> TaskSequence:
    """Shuffle the classes with ``seed``, chunk them into tasks and route samples by label."""
    groups = _class_groups(train.num_classes, num_tasks, seed)
    test = test if test is not None else train.subset([])
    tasks = [Task(train.with_classes(g), test.with_classes(g), g) for g in groups]
    return TaskSequence(protocol, tasks, train.num_classes, seed)


def split_task_incremental(train: Dataset, num_tasks: int, seed: int, test: Optional[Dataset] = None) -> TaskSequence:
    return split_class_incremental(train, num_tasks, seed, test, protocol="task_incremental")


def _shards(n: int, num_tasks: int, rng) -> List[np.ndarray]:
    return [np.sort(s) for s in np.array_split(rng.permutation(n), num_tasks)]


def split_data_incremental(train: Dataset, num_tasks: int, seed: int, test: Optional[Dataset] = None) -> TaskSequence:
    """Seeded random shards of near-equal size, each keeping the full label space."""
    if num_tasks < 1:
        raise ValueError("need at least one task")
    if len(train) < num_tasks:
        raise DataError(f"{len(train)} samples cannot fill {num_tasks} shards")
    rng = np.random.default_rng(seed)
    train_shards = _shards(len(train), num_tasks, rng)
    if test is not None and len(test) >= num_tasks:
        test_shards = [test.subset(s) for s in _shards(len(test), num_tasks, rng)]
    else:
        test_shards = [test if test is not None else train.subset([])] * num_tasks
    full = tuple(range(train.num_classes))
    tasks = [Task(train.subset(s), ts, full) for s, ts in zip(train_shards, test_shards)]
    return TaskSequence("data_incremental", tasks, train.num_classes, seed)


def make_sequence(protocol: str, train: Dataset, num_tasks: int, seed: int, test: Optional[Dataset] = None) -> TaskSequence:
    if protocol == "class_incremental":
        return split_class_incremental(train, num_tasks, seed, test)
    if protocol == "task_incremental":
        return split_task_incremental(train, num_tasks, seed, test)
    if protocol == "data_incremental":
        return split_data_incremental(train, num_tasks, seed, test)
    raise ValueError(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# benchmark construction


@dataclass(frozen=True)
class BenchmarkSpec:
    synthetic: SyntheticParams = SyntheticParams()
    pretrain_classes: int = 10
    pretrain_split: str = "classes"
    pretrain_fraction: float = 0.5
    test_fraction: float = 0.25
    hidden: tuple = (64, 64)
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05


@dataclass
class Benchmark:
    train: Dataset
    test: Dataset
    base: BaseModel


def make_benchmark(spec: BenchmarkSpec, seed: int) -> Benchmark:
    """Generate data, pre-train a base network on a held-out split, re-initialize its head.

    With ``pretrain_split="classes"`` the generator draws extra classes used only
    for pre-training; with ``"samples"`` a fraction of the downstream samples is
    held out instead.
    """
    K = spec.synthetic.num_classes
    if spec.pretrain_split == "classes":
        total = replace(spec.synthetic, num_classes=K + spec.pretrain_classes)
        full = generate_synthetic(total, seed)
        down_idx = np.flatnonzero(full.labels < K)
        pre_idx = np.flatnonzero(full.labels >= K)
        pre = Dataset(full.features[pre_idx], full.labels[pre_idx] - K, spec.pretrain_classes)
        down = Dataset(full.features[down_idx], full.labels[down_idx], K)
        pre_K = spec.pretrain_classes
    elif spec.pretrain_split == "samples":
        full = generate_synthetic(spec.synthetic, seed)
        down, pre = train_test_split(full, spec.pretrain_fraction, task_seed(seed, 7))
        pre_K = K
    else:
        raise ValueError(f"unknown pretrain_split {spec.pretrain_split!r}")
    train, test = train_test_split(down, spec.test_fraction, task_seed(seed, 11))
    base = pretrain(pre, pre_K, K, spec.hidden, spec.pretrain_epochs, spec.pretrain_lr, seed)
    return Benchmark(train, test, base)


def pretrain(data: Dataset, pre_classes: int, num_classes: int, hidden: Sequence[int],
             epochs: int, lr: float, seed: int) -> BaseModel:
    spec = mlp_spec(data.dim, hidden, pre_classes)
    model = init_model(spec, task_seed(seed, 1))
    if epochs > 0:
        cfg = default_nonlinear_config(epochs=epochs, seed=task_seed(seed, 2),
                                       optimizer=sgd(lr, schedule=()))
        model = train_nonlinear(model, data, cfg)
    return reinit_head(model, num_classes, task_seed(seed, 3))


# ---------------------------------------------------------------------------
# results


@dataclass
class RunResult:
    method: str
    protocol: str
    num_tasks: int
    seed: int
    component_accuracies: List[float] = field(default_factory=list)
    composed_accuracies: List[float] = field(default_factory=list)
    train_seconds: List[float] = field(default_factory=list)
    inference_us_per_sample: float = float("nan")
    dataset: str = ""
    peak_live_deltas: int = 0
    model: object = field(default=None, repr=False)
    history: Dict[int, list] = field(default_factory=dict, repr=False)

    @property
    def final_accuracy(self) -> float:
        return self.composed_accuracies[-1]


class LiveModels:
    """Counts driver-held models that are still alive, via weak references.

    Sampled at step boundaries it shows how many deltas a driver keeps
    between tasks, independent of what Python happens to free later.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0

    def track(self, obj):
        self.live += 1
        weakref.finalize(obj, self._release)
        return obj

    def _release(self):
        self.live -= 1

    def sample(self) -> int:
        self.peak = max(self.peak, self.live)
        return self.live


def _seen(seq: TaskSequence, t: int) -> List[Task]:
    return seq.tasks[:t + 1]


def evaluate_seen(predictor, seq: TaskSequence, t: int) -> float:
    """Accuracy over the test sets of tasks 0..t; per-task restricted for task-incremental."""
    tasks = [task for task in _seen(seq, t) if len(task.test)]
    if not tasks:
        raise ValueError("no test data for the seen tasks")
    if seq.restricted:
        correct = sum(evaluate(predictor, task.test, task.classes) * len(task.test) for task in tasks)
        return correct / sum(len(task.test) for task in tasks)
    return evaluate(predictor, Dataset.concat([task.test for task in tasks]))


def _component_accuracy(predictor, seq: TaskSequence, task: Task) -> float:
    if not len(task.test):
        return float("nan")
    restriction = task.classes if seq.restricted else None
    return evaluate(predictor, task.test, restriction)


def time_inference(predictor, x: np.ndarray, repeats: int = 3) -> float:
    """Median wall time per sample in microseconds."""
    fn = as_predictor(predictor)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(x)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) / max(len(x), 1) * 1e6


def _all_test(seq: TaskSequence) -> np.ndarray:
    return np.concatenate([t.test.features for t in seq.tasks if len(t.test)])


def _check_base(seq: TaskSequence, base: BaseModel):
    if base.spec.output_dim != seq.num_classes:
        raise ValueError(f"base head has width {base.spec.output_dim}, sequence has {seq.num_classes} classes")


def _train_component(base, seq, cfg, t, init=None):
    task_cfg = replace(cfg, seed=task_seed(cfg.seed, t))
    hist: list = []
    t0 = time.perf_counter()
    comp = train_tangent(base, seq.tasks[t].train, task_cfg, init=init, task_id=t, history=hist)
    return comp, time.perf_counter() - t0, hist


def run_tmc(seq: TaskSequence, base: BaseModel, cfg: TrainConfig, parallel: bool = False,
            jobs: Optional[int] = None, keep_log: bool = False, method: str = "tmc") -> RunResult:
    """Train one tangent component per task from the anchor and fold them in task order.

    Components are independent of each other, so with ``parallel`` they are
    trained concurrently; the merge order is fixed, so the result does not
    depend on completion order.
    """
    _check_base(seq, base)
    res = RunResult(method, seq.protocol, len(seq), cfg.seed)
    live = LiveModels()
    running = live.track(TangentModel.at_anchor(base, keep_log=keep_log))

    def fold(t, comp, seconds, hist):
        nonlocal running
        res.train_seconds.append(seconds)
        res.history[t] = hist
        res.component_accuracies.append(_component_accuracy(comp, seq, seq.tasks[t]))
        running = live.track(compose_pair(running, comp, task_id=t))
        res.composed_accuracies.append(evaluate_seen(running, seq, t))

    if parallel:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_component, base, seq, cfg, t) for t in range(len(seq))]
            for t, fut in enumerate(futures):
                comp, seconds, hist = fut.result()
                fold(t, comp, seconds, hist)
                del comp
        live.sample()
    else:
        for t in range(len(seq)):
            comp, seconds, hist = _train_component(base, seq, cfg, t)
            live.track(comp)
            live.sample()
            fold(t, comp, seconds, hist)
            del comp
            live.sample()
    res.peak_live_deltas = live.peak
    res.model = running
    res.inference_us_per_sample = time_inference(running, _all_test(seq))
    return res


def run_tmc_seq(seq: TaskSequence, base: BaseModel, cfg: TrainConfig, keep_log: bool = False) -> RunResult:
    """As ``run_tmc`` but each component starts from the previous composed delta."""
    _check_base(seq, base)
    cfg = replace(cfg, init_mode="previous_composed")
    res = RunResult("tmc_seq", seq.protocol, len(seq), cfg.seed)
    running = TangentModel.at_anchor(base, keep_log=keep_log)
    for t in range(len(seq)):
        comp, seconds, hist = _train_component(base, seq, cfg, t, init=running.delta)
        res.train_seconds.append(seconds)
        res.history[t] = hist
        res.component_accuracies.append(_component_accuracy(comp, seq, seq.tasks[t]))
        running = compose_pair(running, comp, task_id=t)
        res.composed_accuracies.append(evaluate_seen(running, seq, t))
    res.peak_live_deltas = 2
    res.model = running
    res.inference_us_per_sample = time_inference(running, _all_test(seq))
    return res


def run_baseline(seq: TaskSequence, base: BaseModel, cfg: TrainConfig, method: str) -> RunResult:
    """Train per-method components and evaluate the combined predictor after every task.

    ``cfg`` is used as given: callers pick a non-linear config (cross-entropy,
    SGD) for naive_seq/soup/ens_* and a tangent config for tme/tmc_fc.
    """
    if method not in BASELINES:
        raise ValueError(f"unknown baseline {method!r}; expected one of {BASELINES}")
    _check_base(seq, base)
    if method == "tmc_fc":
        return run_tmc(seq, base, replace(cfg, head_only=True), method="tmc_fc")

    res = RunResult(method, seq.protocol, len(seq), cfg.seed)
    members: list = []
    current = base
    predictor = None
    for t in range(len(seq)):
        task_cfg = replace(cfg, seed=task_seed(cfg.seed, t))
        task = seq.tasks[t]
        hist: list = []
        t0 = time.perf_counter()
        if method == "naive_seq":
            current = train_nonlinear(current, task.train, task_cfg, history=hist)
            comp = current
        elif method == "tme":
            comp = train_tangent(base, task.train, task_cfg, task_id=t, history=hist)
        else:
            comp = train_nonlinear(base, task.train, task_cfg, history=hist)
        res.train_seconds.append(time.perf_counter() - t0)
        res.history[t] = hist
        res.component_accuracies.append(_component_accuracy(comp, seq, task))

        if method == "naive_seq":
            predictor = current
        else:
            members.append(comp)
            if method == "soup":
                predictor = soup(members)
            else:
                coll = ModelCollection.uniform(members)
                mode = "softmax" if method in ("ens_softmax", "tme") else "logits"
                predictor = as_predictor(coll, mode)
        res.composed_accuracies.append(evaluate_seen(predictor, seq, t))
    res.model = predictor
    res.inference_us_per_sample = time_inference(predictor, _all_test(seq))
    return res


def run_method(method: str, seq: TaskSequence, base: BaseModel, cfg: TrainConfig,
               parallel: bool = False, jobs: Optional[int] = None) -> RunResult:
    if method == "tmc":
        return run_tmc(seq, base, cfg, parallel=parallel, jobs=jobs)
    if method == "tmc_seq":
        return run_tmc_seq(seq, base, cfg)
    return run_baseline(seq, base, cfg, method)


# ---------------------------------------------------------------------------
# unlearning


@dataclass
class UnlearnReport:
    task: int
    forgotten_accuracy_before: float
    forgotten_accuracy_after: float
    remaining_accuracy: float
    fresh_remaining_accuracy: float
    max_logit_diff: float
    argmax_identical: bool


def _accuracy_on(predictor, seq: TaskSequence, ids: Sequence[int]) -> float:
    tasks = [seq.tasks[i] for i in ids if len(seq.tasks[i].test)]
    if not tasks:
        return float("nan")
    if seq.restricted:
        correct = sum(evaluate(predictor, t.test, t.classes) * len(t.test) for t in tasks)
        return correct / sum(len(t.test) for t in tasks)
    return evaluate(predictor, Dataset.concat([t.test for t in tasks]))


def demo_unlearn(seq: TaskSequence, result: RunResult) -> List[UnlearnReport]:
    """Forget each task in turn and compare against recomposing the others from scratch."""
    composed = result.model
    if not isinstance(composed, TangentModel) or composed.component_log is None:
        raise ValueError("unlearning needs a composition built with keep_log=True")
    records = {r.task_id: r for r in composed.component_log}
    x = _all_test(seq)
    reports = []
    for i in composed.task_ids():
        forgotten = unlearn(composed, i, rescale=True)
        others = [k for k in composed.task_ids() if k != i]
        if others:
            fresh = compose_many([TangentModel(composed.base, records[k].delta, 1) for k in others])
            a, b = tangent_forward(forgotten, x), tangent_forward(fresh, x)
            diff = float(np.max(np.abs(a - b)))
            same = bool(np.array_equal(np.argmax(a, axis=1), np.argmax(b, axis=1)))
            remaining, fresh_remaining = _accuracy_on(forgotten, seq, others), _accuracy_on(fresh, seq, others)
        else:
            diff, same = float(np.max(np.abs(forgotten.delta.values))), True
            remaining = fresh_remaining = float("nan")
        reports.append(UnlearnReport(
            task=i,
            forgotten_accuracy_before=_accuracy_on(composed, seq, [i]),
            forgotten_accuracy_after=_accuracy_on(forgotten, seq, [i]),
            remaining_accuracy=remaining,
            fresh_remaining_accuracy=fresh_remaining,
            max_logit_diff=diff,
            argmax_identical=same,
        ))
    return reports


def unlearn_all(composed: TangentModel, rescale: bool = True) -> TangentModel:
    for i in composed.task_ids():
        composed = unlearn(composed, i, rescale=rescale)
    return composed

