"""Command-line entry point: ``tmc <command> [flags]``.

Progress goes to stderr; machine-readable output (JSON reports, accuracy)
goes to stdout or to the files named by flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from typing import List, Optional

import numpy as np

from .continual import make_sequence, task_seed
from .ensembles import ModelCollection, ensemble_logits, evaluate
from .experiment import build_benchmark, method_config, run_experiment, summary, write_outputs
from .io.checkpoint import (
    CheckpointError,
    load_base,
    load_checkpoint,
    save_base,
    save_tangent,
    to_base,
    to_tangent,
)
from .io.config import ConfigError, apply_overrides, load_config, resolved_dict
from .io.datasets import CsvSchema, DataError, load_csv_dataset
from .losses import LossSpec
from .tangent import (
    AnchorMismatch,
    TangentModel,
    UnlearnError,
    compose_many,
    compose_pair,
    restrict_to_head,
    tangent_forward,
    unlearn,
)
from .training import TrainingDiverged, train_tangent

log = logging.getLogger("tmc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_IO = 5
EXIT_MODEL = 6


def _announce(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, "config": resolved}, sort_keys=True, default=str), file=sys.stderr)


def _task_id(raw: str):
    return int(raw) if raw.lstrip("-").isdigit() else raw


def _load_model(path, base):
    ckpt = load_checkpoint(path)
    return to_tangent(ckpt, base) if ckpt.kind == "tangent" else to_base(ckpt)


def _config(args):
    cfg = load_config(args.config)
    return apply_overrides(cfg, seed=getattr(args, "seed", None), jobs=getattr(args, "jobs", None),
                           out=getattr(args, "out_dir", None))


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    _announce("pretrain", {"config": resolved_dict(cfg), "seed": seed, "out": args.out})
    bench = build_benchmark(cfg, seed)
    save_base(args.out, bench.base, {"seed": seed, "dataset": cfg.dataset_name})
    log.info("wrote base model %s (fingerprint %s)", args.out, bench.base.fingerprint[:12])
    return EXIT_OK


def _task_data(args, cfg, base):
    if args.data:
        return load_csv_dataset(args.data, CsvSchema(num_classes=base.spec.output_dim)), None
    seed = cfg.seeds[0]
    bench = build_benchmark(cfg, seed)
    if bench.base.fingerprint != base.fingerprint:
        raise AnchorMismatch("the supplied base was not pre-trained from this config and seed")
    seq = make_sequence(args.protocol, bench.train, cfg.num_tasks, seed, bench.test)
    if not 0 <= args.task < len(seq):
        raise DataError(f"task {args.task} out of range for {len(seq)} tasks")
    return seq.tasks[args.task].train, seq


def cmd_train_task(args) -> int:
    cfg = _config(args)
    base = load_base(args.base)
    seed = cfg.seeds[0]
    tc = method_config(cfg, "tmc_fc" if args.head_only else "tmc", args.protocol, task_seed(seed, args.task))
    if args.beta is not None:
        tc = replace(tc, loss=LossSpec("rsl", tc.loss.alpha, args.beta))
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    tc = replace(tc, head_only=args.head_only)
    init = None
    if args.init:
        tc = replace(tc, init_mode="previous_composed")
        init = _load_model(args.init, base).delta
    _announce("train-task", {"base": args.base, "task": args.task, "protocol": args.protocol,
                             "train": {"epochs": tc.epochs, "batch_size": tc.batch_size, "seed": tc.seed,
                                       "loss": [tc.loss.kind, tc.loss.alpha, tc.loss.beta],
                                       "lr": tc.optimizer.learning_rate, "head_only": tc.head_only},
                             "init": args.init, "out": args.out})
    data, _ = _task_data(args, cfg, base)
    history: list = []
    comp = train_tangent(base, data, tc, init=init, task_id=args.task, history=history)
    for rec in history:
        log.info("epoch %d loss %.6g lr %.3g", rec.epoch, rec.mean_loss, rec.lr)
    save_tangent(args.out, comp, {"seed": tc.seed, "task": args.task})
    return EXIT_OK


def cmd_compose(args) -> int:
    _announce("compose", vars(args))
    base = load_base(args.base)
    comps = [_load_model(p, base) for p in args.components]
    if any(not isinstance(c, TangentModel) for c in comps):
        raise CheckpointError("compose takes tangent checkpoints only")
    if args.weights:
        if len(args.weights) != len(comps):
            raise ConfigError("--weights", f"{len(comps)} components but {len(args.weights)} weights")
        model = compose_many(comps, args.weights)
    else:
        model = TangentModel.at_anchor(base, keep_log=args.keep_log)
        for i, c in enumerate(comps):
            ids = c.task_ids()
            tid = ids[0] if len(ids) == 1 and ids[0] is not None else i
            if not args.keep_log:
                c = c.without_log()
            model = compose_pair(model, c, task_id=tid)
    if args.head_only:
        model = restrict_to_head(model)
    save_tangent(args.out, model, {"components": [str(p) for p in args.components]})
    return EXIT_OK


def cmd_unlearn(args) -> int:
    _announce("unlearn", vars(args))
    base = load_base(args.base)
    model = _load_model(args.model, base)
    if not isinstance(model, TangentModel):
        raise CheckpointError("unlearn takes a composed tangent checkpoint")
    out = unlearn(model, _task_id(args.task), rescale=not args.no_rescale)
    save_tangent(args.out, out, {"unlearned": args.task})
    return EXIT_OK


def cmd_eval(args) -> int:
    _announce("eval", vars(args))
    base = load_base(args.base)
    model = _load_model(args.model, base)
    restriction = [int(c) for c in args.restrict.split(",")] if args.restrict else None
    if args.data:
        data = load_csv_dataset(args.data, CsvSchema(num_classes=base.spec.output_dim))
        acc = evaluate(model, data, restriction)
    else:
        if not args.config:
            raise ConfigError("--data", "give --data or --config")
        cfg = _config(args)
        bench = build_benchmark(cfg, cfg.seeds[0])
        acc = evaluate(model, bench.test, restriction)
    print(json.dumps({"model": str(args.model), "accuracy": acc}))
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    cfg = _config(args)
    if args.timing:
        cfg = replace(cfg, timing=True)
    _announce("run-experiment", resolved_dict(cfg))
    results = run_experiment(cfg)
    write_outputs(cfg, results)
    print(summary(results), file=sys.stderr)
    return EXIT_OK


def median_latency(fn, x, repetitions: int) -> float:
    """Median seconds per sample over ``repetitions`` calls of ``fn(x)``."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    fn(x)
    times = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        fn(x)
        times[i] = time.perf_counter() - t0
    return float(np.median(times)) / len(x)


def bench_inference(components: List[TangentModel], x: np.ndarray, repetitions: int) -> dict:
    composed = compose_many(components)
    single = components[0]
    ens = ModelCollection.uniform(components)
    return {
        "components": len(components),
        "single_us": median_latency(lambda v: tangent_forward(single, v), x, repetitions) * 1e6,
        "composed_us": median_latency(lambda v: tangent_forward(composed, v), x, repetitions) * 1e6,
        "ensemble_us": median_latency(lambda v: ensemble_logits(ens, v), x, repetitions) * 1e6,
    }


def cmd_bench_inference(args) -> int:
    _announce("bench-inference", vars(args))
    if args.repetitions < 1:
        raise ConfigError("--repetitions", "must be >= 1")
    base = load_base(args.base)
    comps = [_load_model(p, base) for p in args.checkpoints]
    if any(not isinstance(c, TangentModel) for c in comps):
        raise CheckpointError("bench-inference takes tangent checkpoints only")
    x = np.random.default_rng(args.seed or 0).normal(size=(args.batch_size, base.spec.input_dim))
    report = bench_inference(comps, x, args.repetitions)
    report["composed_over_single"] = report["composed_us"] / report["single_us"]
    report["ensemble_over_single"] = report["ensemble_us"] / report["single_us"]
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tmc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="pre-train the base network and write a base checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train-task", help="fit one tangent component")
    s.add_argument("--config", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--protocol", default="class_incremental")
    s.add_argument("--task", type=int, default=0)
    s.add_argument("--data", help="CSV of training samples instead of the configured task split")
    s.add_argument("--init", help="tangent checkpoint to start from (sequential initialization)")
    s.add_argument("--beta", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--head-only", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_task)

    s = sub.add_parser("compose", help="compose tangent checkpoints into one model")
    s.add_argument("--base", required=True)
    s.add_argument("components", nargs="+")
    s.add_argument("--weights", type=float, nargs="+")
    s.add_argument("--keep-log", action="store_true", help="retain components so tasks can be unlearned")
    s.add_argument("--head-only", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compose)

    s = sub.add_parser("unlearn", help="remove one task from a composed checkpoint (no data needed)")
    s.add_argument("--base", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--no-rescale", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_unlearn)

    s = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    s.add_argument("--base", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--restrict", help="comma-separated class subset")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run-experiment", help="run a configured experiment matrix")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--out", dest="out_dir")
    s.add_argument("--timing", action="store_true", help="also record wall-clock columns")
    s.set_defaults(func=cmd_run_experiment)

    s = sub.add_parser("bench-inference", help="latency of a composed model vs an ensemble")
    s.add_argument("--base", required=True)
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--repetitions", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_bench_inference)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except TrainingDiverged as e:
        log.error("%s", e)
        return EXIT_DIVERGED
    except (CheckpointError, AnchorMismatch, UnlearnError) as e:
        log.error("model error: %s", e)
        return EXIT_MODEL
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
