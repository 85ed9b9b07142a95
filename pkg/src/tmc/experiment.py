"""Runs a configured matrix of (seed, protocol, method) jobs and writes the outputs."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import List

import numpy as np

from .continual import (
    Benchmark,
    BenchmarkSpec,
    make_benchmark,
    make_sequence,
    pretrain,
    run_method,
    task_seed,
)
from .io.config import TANGENT_METHODS, ExperimentConfig, TrainSection
from .io.datasets import CsvSchema, Standardizer, load_csv_dataset, train_test_split
from .io.results import write_epoch_log, write_results
from .training import OptimizerSpec, TrainConfig

log = logging.getLogger(__name__)


def train_config(section: TrainSection, kind: str, loss, seed: int) -> TrainConfig:
    opt = OptimizerSpec(kind, section.lr, momentum=section.momentum, schedule=section.schedule)
    return TrainConfig(epochs=section.epochs, batch_size=section.batch_size, seed=seed, loss=loss, optimizer=opt)


def method_config(cfg: ExperimentConfig, method: str, protocol: str, seed: int) -> TrainConfig:
    loss = cfg.loss_for(method, protocol)
    if method in TANGENT_METHODS:
        return train_config(cfg.tangent, "adam", loss, seed)
    return train_config(cfg.nonlinear, "sgd", loss, seed)


def build_benchmark(cfg: ExperimentConfig, seed: int) -> Benchmark:
    pt = cfg.pretrain
    if cfg.synthetic is not None:
        spec = BenchmarkSpec(
            synthetic=cfg.synthetic,
            pretrain_classes=pt.classes,
            pretrain_split=pt.split,
            pretrain_fraction=pt.fraction,
            test_fraction=cfg.test_fraction,
            hidden=tuple(pt.hidden),
            pretrain_epochs=pt.epochs,
            pretrain_lr=pt.lr,
        )
        return make_benchmark(spec, seed)
    src = cfg.csv
    schema = CsvSchema(src.label_column, src.num_classes)
    train = load_csv_dataset(src.train, schema)
    K = max(train.num_classes, src.num_classes or 0)
    schema = replace(schema, num_classes=K)
    train = load_csv_dataset(src.train, schema)
    test = load_csv_dataset(src.test, schema)
    if src.normalize:
        stats = Standardizer.fit(train.features)
        train, test = stats.apply(train), stats.apply(test)
    down, pre = train_test_split(train, pt.fraction, task_seed(seed, 7))
    base = pretrain(pre, K, K, pt.hidden, pt.epochs, pt.lr, seed)
    return Benchmark(down, test, base)


def run_experiment(cfg: ExperimentConfig) -> List:
    """All configured runs, in a fixed order regardless of ``cfg.jobs``."""
    jobs = []
    for seed in cfg.seeds:
        bench = build_benchmark(cfg, seed)
        for protocol in cfg.protocols:
            seq = make_sequence(protocol, bench.train, cfg.num_tasks, seed, bench.test)
            for method in cfg.methods:
                jobs.append((seed, protocol, method, seq, bench.base))

    def run(job):
        seed, protocol, method, seq, base = job
        log.info("running %s / %s / seed %d", method, protocol, seed)
        tc = method_config(cfg, method, protocol, seed)
        res = run_method(method, seq, base, tc, parallel=cfg.parallel, jobs=cfg.jobs)
        res.dataset = cfg.dataset_name
        res.model = None
        log.info("%s / %s / seed %d: final accuracy %.4f", method, protocol, seed, res.final_accuracy)
        return res

    if cfg.jobs > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]


def write_outputs(cfg: ExperimentConfig, results: List) -> None:
    out = cfg.output(cfg.results_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results(results, out, include_timing=cfg.timing)
    if cfg.epoch_log_path:
        write_epoch_log(results, cfg.output(cfg.epoch_log_path))


def summary(results: List) -> str:
    lines = []
    for r in results:
        acc = np.round(r.composed_accuracies, 4).tolist()
        lines.append(f"{r.dataset} {r.protocol} seed={r.seed} {r.method:<11} final={r.final_accuracy:.4f} per-task={acc}")
    return "\n".join(lines)
