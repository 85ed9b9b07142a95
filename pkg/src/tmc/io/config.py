"""Experiment configuration: a single JSON document, validated field by field.

Example::

    {
      "name": "gm10",
      "dataset": {"synthetic": {"kind": "gaussian_mixture", "num_classes": 10, "dim": 32,
                                "samples_per_class": 400, "noise": 1.0, "separation": 5.0}},
      "pretrain": {"split": "classes", "classes": 10, "epochs": 30, "lr": 0.05, "hidden": [64, 64]},
      "protocols": ["class_incremental"],
      "num_tasks": 5,
      "methods": ["tmc", "naive_seq"],
      "seeds": [0, 1],
      "tangent": {"epochs": 50, "batch_size": 32, "lr": 0.001},
      "nonlinear": {"epochs": 50, "batch_size": 32, "lr": 0.01, "momentum": 0.9},
      "loss": {"alpha": 1.0},
      "methods_config": {"tme": {"loss": {"beta": 5}}},
      "output": {"results": "results.csv", "epoch_log": "epochs.jsonl"}
    }

``loss.beta`` may be omitted, in which case it defaults per protocol (25 for
class/task-incremental, 5 for data-incremental; always 5 for tme).
Environment variables ``TMC_SEED``, ``TMC_JOBS`` and ``TMC_OUT`` override the
file; command-line flags override both.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from ..losses import LossSpec
from .datasets import SyntheticParams

PROTOCOLS = ("class_incremental", "data_incremental", "task_incremental")
METHODS = ("tmc", "tmc_seq", "tme", "soup", "ens_logit", "ens_softmax", "tmc_fc", "naive_seq")
TANGENT_METHODS = ("tmc", "tmc_seq", "tme", "tmc_fc")
DEFAULT_SCHEDULE = ((25, 0.1), (40, 0.1))


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.0
    schedule: Tuple[Tuple[int, float], ...] = DEFAULT_SCHEDULE


@dataclass(frozen=True)
class CsvSource:
    train: str
    test: str
    label_column: str = "label"
    num_classes: Optional[int] = None
    normalize: bool = True


@dataclass(frozen=True)
class PretrainSection:
    split: str = "classes"
    classes: int = 10
    fraction: float = 0.5
    epochs: int = 30
    lr: float = 0.05
    hidden: Tuple[int, ...] = (64, 64)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    synthetic: Optional[SyntheticParams] = SyntheticParams()
    csv: Optional[CsvSource] = None
    pretrain: PretrainSection = PretrainSection()
    test_fraction: float = 0.25
    protocols: Tuple[str, ...] = ("class_incremental",)
    num_tasks: int = 5
    methods: Tuple[str, ...] = ("tmc",)
    seeds: Tuple[int, ...] = (0,)
    tangent: TrainSection = TrainSection()
    nonlinear: TrainSection = TrainSection(lr=1e-2, momentum=0.9)
    alpha: float = 1.0
    beta: Optional[float] = None
    method_beta: Dict[str, float] = field(default_factory=lambda: {"tme": 5.0})
    parallel: bool = False
    jobs: int = 1
    timing: bool = False
    results_path: str = "results.csv"
    epoch_log_path: Optional[str] = "epochs.jsonl"
    out_dir: str = "."

    @property
    def dataset_name(self) -> str:
        if self.csv is not None:
            return Path(self.csv.train).stem
        s = self.synthetic
        return f"{s.kind}-{s.num_classes}c-{s.dim}d"

    def beta_for(self, method: str, protocol: str) -> float:
        if method in self.method_beta:
            return self.method_beta[method]
        if self.beta is not None:
            return self.beta
        return 5.0 if protocol == "data_incremental" else 25.0

    def loss_for(self, method: str, protocol: str) -> LossSpec:
        if method in TANGENT_METHODS:
            return LossSpec("rsl", self.alpha, self.beta_for(method, protocol))
        return LossSpec("cross_entropy")

    def output(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.out_dir) / p


def _get(d: dict, key: str, path: str, kind, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}", "missing required field")
        return default
    v = d[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if kind is not None and not isinstance(v, kind) or isinstance(v, bool) and kind in (int, float):
        raise ConfigError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
    return v


def _positive(v, path):
    if v is None or not v > 0:
        raise ConfigError(path, f"must be positive, got {v!r}")
    return v


def _train_section(d: dict, path: str, base: TrainSection) -> TrainSection:
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    known = {"epochs", "batch_size", "lr", "momentum", "schedule"}
    for k in d:
        if k not in known:
            raise ConfigError(f"{path}.{k}", "unknown field")
    sched = d.get("schedule", base.schedule)
    try:
        sched = tuple((int(e), float(f)) for e, f in sched)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.schedule", "expected a list of [epoch, factor] pairs") from None
    return TrainSection(
        epochs=_positive(_get(d, "epochs", path, int, base.epochs), f"{path}.epochs"),
        batch_size=_positive(_get(d, "batch_size", path, int, base.batch_size), f"{path}.batch_size"),
        lr=_get(d, "lr", path, float, base.lr),
        momentum=_get(d, "momentum", path, float, base.momentum),
        schedule=sched,
    )


def parse_config(d: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("$", "config must be a JSON object")
    known = {"name", "dataset", "pretrain", "test_fraction", "protocols", "num_tasks", "methods", "seeds",
             "tangent", "nonlinear", "loss", "methods_config", "parallel", "jobs", "timing", "output"}
    for k in d:
        if k not in known:
            raise ConfigError(f"$.{k}", "unknown field")
    cfg = ExperimentConfig()
    kw: dict = {"name": _get(d, "name", "$", str, cfg.name)}

    ds = _get(d, "dataset", "$", dict, {"synthetic": {}})
    if ("synthetic" in ds) == ("csv" in ds):
        raise ConfigError("$.dataset", "give exactly one of 'synthetic' or 'csv'")
    if "synthetic" in ds:
        s = ds["synthetic"]
        p = "$.dataset.synthetic"
        try:
            syn = SyntheticParams(**s)
            syn.validate()
        except TypeError as e:
            raise ConfigError(p, str(e)) from None
        except ValueError as e:
            raise ConfigError(p, str(e)) from None
        kw["synthetic"], kw["csv"] = syn, None
    else:
        c = ds["csv"]
        p = "$.dataset.csv"
        paths = {}
        for key in ("train", "test"):
            raw = _get(c, key, p, str, required=True)
            full = Path(raw) if Path(raw).is_absolute() else base_dir / raw
            if not full.exists():
                raise ConfigError(f"{p}.{key}", f"file {full} does not exist")
            paths[key] = str(full)
        kw["synthetic"] = None
        kw["csv"] = CsvSource(paths["train"], paths["test"],
                              _get(c, "label_column", p, str, "label"),
                              _get(c, "num_classes", p, int, None),
                              _get(c, "normalize", p, bool, True))

    pt = _get(d, "pretrain", "$", dict, {})
    base_pt = cfg.pretrain
    split = _get(pt, "split", "$.pretrain", str, base_pt.split)
    if split not in ("classes", "samples"):
        raise ConfigError("$.pretrain.split", "expected 'classes' or 'samples'")
    if kw["csv"] is not None and split == "classes":
        split = "samples"
    kw["pretrain"] = PretrainSection(
        split=split,
        classes=_get(pt, "classes", "$.pretrain", int, base_pt.classes),
        fraction=_get(pt, "fraction", "$.pretrain", float, base_pt.fraction),
        epochs=_get(pt, "epochs", "$.pretrain", int, base_pt.epochs),
        lr=_get(pt, "lr", "$.pretrain", float, base_pt.lr),
        hidden=tuple(_get(pt, "hidden", "$.pretrain", list, list(base_pt.hidden))),
    )
    kw["test_fraction"] = _get(d, "test_fraction", "$", float, cfg.test_fraction)

    protocols = _get(d, "protocols", "$", list, list(cfg.protocols))
    for i, pr in enumerate(protocols):
        if pr not in PROTOCOLS:
            raise ConfigError(f"$.protocols[{i}]", f"unknown protocol {pr!r}")
    kw["protocols"] = tuple(protocols)
    kw["num_tasks"] = _positive(_get(d, "num_tasks", "$", int, cfg.num_tasks), "$.num_tasks")
    methods = _get(d, "methods", "$", list, list(cfg.methods))
    for i, m in enumerate(methods):
        if m not in METHODS:
            raise ConfigError(f"$.methods[{i}]", f"unknown method {m!r}")
    kw["methods"] = tuple(methods)
    seeds = _get(d, "seeds", "$", list, list(cfg.seeds))
    for i, s in enumerate(seeds):
        if not isinstance(s, int) or isinstance(s, bool):
            raise ConfigError(f"$.seeds[{i}]", "seeds must be integers")
    kw["seeds"] = tuple(seeds)

    kw["tangent"] = _train_section(d.get("tangent", {}), "$.tangent", cfg.tangent)
    kw["nonlinear"] = _train_section(d.get("nonlinear", {}), "$.nonlinear", cfg.nonlinear)

    loss = _get(d, "loss", "$", dict, {})
    kw["alpha"] = _positive(_get(loss, "alpha", "$.loss", float, cfg.alpha), "$.loss.alpha")
    beta = _get(loss, "beta", "$.loss", float, None)
    if beta is not None:
        _positive(beta, "$.loss.beta")
    kw["beta"] = beta
    method_beta = dict(cfg.method_beta)
    for m, mc in _get(d, "methods_config", "$", dict, {}).items():
        p = f"$.methods_config.{m}"
        if m not in METHODS:
            raise ConfigError(p, f"unknown method {m!r}")
        mb = _get(_get(mc, "loss", p, dict, {}), "beta", f"{p}.loss", float, None)
        if mb is not None:
            method_beta[m] = _positive(mb, f"{p}.loss.beta")
    kw["method_beta"] = method_beta

    kw["parallel"] = _get(d, "parallel", "$", bool, cfg.parallel)
    kw["jobs"] = _positive(_get(d, "jobs", "$", int, cfg.jobs), "$.jobs")
    kw["timing"] = _get(d, "timing", "$", bool, cfg.timing)
    out = _get(d, "output", "$", dict, {})
    kw["results_path"] = _get(out, "results", "$.output", str, cfg.results_path)
    kw["epoch_log_path"] = _get(out, "epoch_log", "$.output", str, cfg.epoch_log_path)
    kw["out_dir"] = _get(out, "dir", "$.output", str, str(base_dir))
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("$", f"config file {path} does not exist") from None
    except json.JSONDecodeError as e:
        raise ConfigError("$", f"invalid JSON: {e}") from None
    return parse_config(raw, path.parent)


def apply_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, jobs: Optional[int] = None,
                    out: Optional[str] = None, env: Optional[dict] = None) -> ExperimentConfig:
    """Flags win over ``TMC_*`` environment variables, which win over the file."""
    env = os.environ if env is None else env
    if seed is None and env.get("TMC_SEED"):
        seed = _env_int(env, "TMC_SEED")
    if jobs is None and env.get("TMC_JOBS"):
        jobs = _env_int(env, "TMC_JOBS")
    if out is None and env.get("TMC_OUT"):
        out = env["TMC_OUT"]
    if seed is not None:
        cfg = replace(cfg, seeds=(int(seed),))
    if jobs is not None:
        cfg = replace(cfg, jobs=_positive(int(jobs), "jobs"))
    if out is not None:
        cfg = replace(cfg, out_dir=out)
    return cfg


def _env_int(env, key) -> int:
    try:
        return int(env[key])
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {env[key]!r}") from None


def resolved_dict(cfg: ExperimentConfig) -> dict:
    """Plain-JSON view of the resolved config, printed before a run."""
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=str))
