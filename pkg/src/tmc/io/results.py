"""Results CSV and per-epoch JSON-lines logs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, List

COLUMNS = ("dataset", "protocol", "tasks", "method", "accuracy", "inference_us_per_sample", "train_seconds", "seed")

METHOD_ORDER = ("tmc", "tmc_seq", "tmc_fc", "tme", "soup", "ens_logit", "ens_softmax", "naive_seq")


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _sort_key(r):
    m = METHOD_ORDER.index(r.method) if r.method in METHOD_ORDER else len(METHOD_ORDER)
    return (r.dataset, r.protocol, r.num_tasks, m, r.method, r.seed)


def result_rows(results: Iterable, include_timing: bool = True) -> List[dict]:
    rows = []
    for r in sorted(results, key=_sort_key):
        rows.append({
            "dataset": r.dataset,
            "protocol": r.protocol,
            "tasks": r.num_tasks,
            "method": r.method,
            "accuracy": _fmt(r.final_accuracy),
            "inference_us_per_sample": _fmt(r.inference_us_per_sample) if include_timing else "",
            "train_seconds": _fmt(sum(r.train_seconds)) if include_timing else "",
            "seed": r.seed,
        })
    return rows


def write_results(results: Iterable, path, include_timing: bool = True) -> None:
    """One row per (method, seed) in a fixed order.

    Wall-clock columns are left empty when ``include_timing`` is false, which
    keeps the file byte-identical across reruns.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(result_rows(results, include_timing))


def read_results(path) -> List[dict]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({
                "dataset": row["dataset"],
                "protocol": row["protocol"],
                "tasks": int(row["tasks"]),
                "method": row["method"],
                "accuracy": float(row["accuracy"]) if row["accuracy"] else math.nan,
                "inference_us_per_sample": float(row["inference_us_per_sample"]) if row["inference_us_per_sample"] else math.nan,
                "train_seconds": float(row["train_seconds"]) if row["train_seconds"] else math.nan,
                "seed": int(row["seed"]),
            })
    return out


def write_epoch_log(results: Iterable, path) -> None:
    with Path(path).open("w") as fh:
        for r in sorted(results, key=_sort_key):
            for task in sorted(r.history):
                for rec in r.history[task]:
                    fh.write(json.dumps({
                        "dataset": r.dataset, "protocol": r.protocol, "method": r.method,
                        "seed": r.seed, "task": task, "epoch": rec.epoch,
                        "mean_loss": rec.mean_loss, "lr": rec.lr,
                    }, sort_keys=True) + "\n")
