"""Command-line entry point: ``jachess train|eval|sweep|diagnose``.

Runs are described by one JSON config file::

    {
      "version": 1,
      "model": {"embed_dim": 32, ...},          # ModelConfig keys (num_classes comes from the task)
      "train": {"epochs": 10, "lr": 0.001, ...}, # TrainConfig keys
      "regularizer": {"hessian_dims": 10, ...},  # RegularizerConfig keys
      "tasks": ["token-majority", {"name": "mine", "tsv": "train.tsv", "test_tsv": "test.tsv"}],
      "methods": ["base", "jachess-val"],
      "seeds": [0, 1, 2],
      "data_seed": 0,
      "sizes": {"train": 1024, "unlabeled": 256, "test": 256},
      "output_dir": "runs/demo",
      "eval": {"deltas": [0, 0.5, 1.0], "rates": [0.1, 0.15, 0.2], "noise_seeds": [0]},
      "sweep": {"strategies": [...], "hessian_dims": [0, 5, 10, 20, 50], "method": "jachess-train"},
      "report_formats": ["json", "csv"],
      "workers": 1                                # parallel (task, method, seed) cells
    }

Relative output directories are placed under ``$JACHESS_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import estimators as est
from . import evaluation as E
from . import regularizer as R
from . import trainer as T
from .model import ConfigError, ModelConfig, encode_batch, forward_ids, load_checkpoint, save_checkpoint

log = logging.getLogger("jachess")

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "JACHESS_OUTPUT_ROOT"
_TOP_KEYS = {"version", "model", "train", "regularizer", "tasks", "methods", "seeds", "data_seed",
             "sizes", "output_dir", "eval", "sweep", "report_formats", "workers"}
_NON_SEMANTIC = {"output_dir", "report_formats", "workers"}


class ConfigFileError(Exception):
    """Invalid config; ``where`` is a file:line or a dotted key path."""

    def __init__(self, where, message):
        super().__init__(f"{where}: {message}")
        self.where = where


@dataclass
class TaskEntry:
    name: str
    spec: D.TaskSpec | None = None
    tsv: str | None = None
    test_tsv: str | None = None
    unlabeled_tsv: str | None = None
    pair: bool = False
    target: str = "class"
    num_classes: int = 2
    metric: str = "accuracy"

    @property
    def model_classes(self):
        return self.spec.num_classes if self.spec else self.num_classes

    @property
    def task_metric(self):
        return self.spec.metric if self.spec else self.metric


@dataclass
class RunConfig:
    model: ModelConfig
    train: T.TrainConfig
    tasks: list
    methods: list
    seeds: list
    data_seed: int = 0
    sizes: dict = field(default_factory=lambda: dict(D.DEFAULT_SIZES))
    output_dir: str = "runs"
    eval: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    report_formats: list = field(default_factory=lambda: ["json", "csv"])
    workers: int = 1
    raw: dict = field(default_factory=dict)
    source: str = "<config>"

    def config_hash(self):
        semantic = {k: v for k, v in self.raw.items() if k not in _NON_SEMANTIC}
        blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def output_path(self, override=None):
        p = Path(override or self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p


# ------------------------------------------------------------------ config parsing


def _section(raw, key, cls_from_dict, source):
    try:
        return cls_from_dict(raw.get(key, {}) or {})
    except TypeError as exc:
        raise ConfigFileError(f"{source}:{key}", str(exc)) from None
    except (ConfigError, T.TrainError, R.RegularizerError) as exc:
        raise ConfigFileError(f"{source}:{key}", str(exc)) from None


def _parse_task(item, i, source):
    where = f"{source}:tasks[{i}]"
    if isinstance(item, str):
        try:
            return TaskEntry(item, D.get_task(item))
        except D.DataError as exc:
            raise ConfigFileError(where, str(exc)) from None
    if not isinstance(item, dict) or "name" not in item:
        raise ConfigFileError(where, "expected a task name or an object with a 'name' key")
    allowed = {"name", "tsv", "test_tsv", "unlabeled_tsv", "pair", "target", "num_classes", "metric"}
    extra = set(item) - allowed
    if extra:
        raise ConfigFileError(where, f"unknown keys {sorted(extra)}")
    if "tsv" not in item:
        try:
            return TaskEntry(item["name"], D.get_task(item["name"]))
        except D.DataError as exc:
            raise ConfigFileError(where, str(exc)) from None
    entry = TaskEntry(**item)
    if entry.target not in ("class", "real"):
        raise ConfigFileError(f"{where}.target", "must be 'class' or 'real'")
    if entry.target == "real":
        entry.num_classes = 0
        entry.metric = item.get("metric", "spearman")
    if entry.metric not in E.METRIC_FNS:
        raise ConfigFileError(f"{where}.metric", f"unknown metric {entry.metric!r}")
    if not entry.test_tsv:
        raise ConfigFileError(where, "a TSV task needs 'test_tsv'")
    return entry


def parse_config(raw, source="<config>") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigFileError(source, "top level must be a JSON object")
    extra = set(raw) - _TOP_KEYS
    if extra:
        raise ConfigFileError(source, f"unknown top-level keys {sorted(extra)}")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigFileError(f"{source}:version",
                              f"expected {CONFIG_VERSION}, got {raw.get('version')!r}")
    model = _section(raw, "model", ModelConfig.from_dict, source)
    train_raw = dict(raw.get("train", {}) or {})
    if "regularizer" in raw:
        train_raw["regularizer"] = raw["regularizer"]
    train = _section({"train": train_raw}, "train", T.TrainConfig.from_dict, source)

    tasks = [_parse_task(t, i, source) for i, t in enumerate(raw.get("tasks", []))]
    if not tasks:
        raise ConfigFileError(f"{source}:tasks", "at least one task is required")
    methods = raw.get("methods", ["base"])
    for i, m in enumerate(methods):
        if m not in T.METHODS:
            raise ConfigFileError(f"{source}:methods[{i}]", f"unknown method {m!r}")
    seeds = raw.get("seeds", [0])
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigFileError(f"{source}:seeds", "need a non-empty list of non-negative integers")
    sizes = {**D.DEFAULT_SIZES, **(raw.get("sizes") or {})}
    if set(sizes) != set(D.DEFAULT_SIZES):
        raise ConfigFileError(f"{source}:sizes", f"keys must be {sorted(D.DEFAULT_SIZES)}")
    formats = raw.get("report_formats", ["json", "csv"])
    if not set(formats) <= {"json", "csv"}:
        raise ConfigFileError(f"{source}:report_formats", "allowed formats are json and csv")

    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigFileError(f"{source}:workers", "must be a positive integer")
    cfg = RunConfig(model, train, tasks, list(methods), list(seeds), int(raw.get("data_seed", 0)),
                    sizes, raw.get("output_dir", "runs"), raw.get("eval") or {},
                    raw.get("sweep") or {}, list(formats), workers, raw, source)
    for i, task in enumerate(tasks):
        if task.model_classes == 0:
            bad = [m for m in cfg.methods if m.startswith(("jacobian", "cross-holder"))]
            if bad:
                raise ConfigFileError(f"{source}:methods",
                                      f"{bad} need a classification head; task {task.name!r} is regression")
        has_unlabeled = task.unlabeled_tsv if task.tsv else sizes["unlabeled"] > 0
        needs = [m for m in cfg.methods if m.endswith("-val")]
        if needs and not has_unlabeled:
            raise ConfigFileError(f"{source}:tasks[{i}]",
                                  f"methods {needs} need unlabeled data but task {task.name!r} has none")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(str(path), f"cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    return parse_config(raw, str(path))


# ------------------------------------------------------------------ data


def task_splits(cfg: RunConfig, task: TaskEntry) -> D.SplitSet:
    if task.spec is not None:
        return D.generate_task(task.spec, cfg.sizes, seed=cfg.data_seed)
    schema = D.TsvSchema(task.pair, task.target)
    V = cfg.model.vocab_size
    train = D.load_tsv(task.tsv, schema, V).train
    test = D.load_tsv(task.test_tsv, schema, V).train
    unl = D.strip_labels(D.load_tsv(task.unlabeled_tsv, schema, V).train) if task.unlabeled_tsv else []
    return D.SplitSet(train, unl, test, {})


def task_model(cfg: RunConfig, task: TaskEntry) -> ModelConfig:
    return replace(cfg.model, num_classes=task.model_classes)


def run_dir(root, task, method, seed):
    return Path(root) / task / method / f"seed{seed}"


def _dump(path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_manifest(out, cfg, command, timings):
    _dump(out / "manifest.json", {
        "command": command,
        "config_hash": cfg.config_hash(),
        "config": cfg.raw,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_time_s": timings,
    })


# ------------------------------------------------------------------ commands


def cmd_train(cfg: RunConfig, output=None):
    out = cfg.output_path(output)
    out.mkdir(parents=True, exist_ok=True)
    records, timings = [], {}
    for task in cfg.tasks:
        splits = task_splits(cfg, task)
        mc = task_model(cfg, task)
        for rec in T.run_suite(cfg.methods, cfg.seeds, {task.name: (mc, splits)}, cfg.train,
                               workers=cfg.workers):
            d = run_dir(out, task.name, rec.method, rec.seed)
            d.mkdir(parents=True, exist_ok=True)
            save_checkpoint(rec.checkpoint, d / "checkpoint.bin")
            _dump(d / "record.json", rec.to_dict())
            records.append(rec.to_dict())
            timings[f"{task.name}/{rec.method}/seed{rec.seed}"] = round(rec.wall_time, 3)
            log.info("trained %s %s seed=%d final loss %.4f", task.name, rec.method, rec.seed,
                     rec.loss_history[-1])
    _dump(out / "records.json", records)
    _write_manifest(out, cfg, "train", timings)
    return records


def _eval_settings(cfg):
    ev = cfg.eval
    deltas = [float(d) for d in ev.get("deltas", [0.0, 0.5, 1.0, 2.0])]
    rates = [float(r) for r in ev.get("rates", E.DEFAULT_CORRUPTION_RATES)]
    noise_seeds = [int(s) for s in ev.get("noise_seeds", [0])]
    return deltas, rates, noise_seeds


def cmd_eval(ckpt_dir, cfg: RunConfig, output=None):
    ckpt_dir = Path(ckpt_dir)
    expected = [run_dir(ckpt_dir, t.name, m, s) / "checkpoint.bin"
                for t in cfg.tasks for m in cfg.methods for s in cfg.seeds]
    missing = [str(p) for p in expected if not p.exists()]
    if missing:
        raise FileNotFoundError("missing checkpoint(s):\n  " + "\n  ".join(missing))
    deltas, rates, noise_seeds = _eval_settings(cfg)
    report = E.EvalReport()
    start = time.perf_counter()
    for task in cfg.tasks:
        test = task_splits(cfg, task).test
        for m in cfg.methods:
            for s in cfg.seeds:
                ck = load_checkpoint(run_dir(ckpt_dir, task.name, m, s) / "checkpoint.bin")
                E.evaluate_run(ck, test, task.task_metric, task=task.name, method=m, seed=s,
                               deltas=deltas, rates=rates, noise_seeds=noise_seeds, report=report)
    out = Path(output) if output else ckpt_dir
    out.mkdir(parents=True, exist_ok=True)
    if "json" in cfg.report_formats:
        (out / "eval_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    if "csv" in cfg.report_formats:
        (out / "eval_report.csv").write_text(report.to_csv(), encoding="utf-8")
    _write_manifest(out, cfg, "eval", {"eval": round(time.perf_counter() - start, 3)})
    return report


def cmd_sweep(cfg: RunConfig, output=None):
    sw = cfg.sweep
    strategies = sw.get("strategies", list(R.STRATEGIES))
    dims = sw.get("hessian_dims", [0, 5, 10, 20, 50])
    method = sw.get("method", "jachess-train")
    if not strategies or not dims:
        raise ConfigFileError(f"{cfg.source}:sweep", "empty grid")
    for s in strategies:
        if s not in R.STRATEGIES:
            raise ConfigFileError(f"{cfg.source}:sweep.strategies", f"unknown strategy {s!r}")
    if not method.startswith("jachess"):
        raise ConfigFileError(f"{cfg.source}:sweep.method", "sweep varies the jachess penalty")
    out = cfg.output_path(output)
    out.mkdir(parents=True, exist_ok=True)
    cells, timings = [], {}
    for task in cfg.tasks:
        splits = task_splits(cfg, task)
        mc = task_model(cfg, task)
        references = {}
        if sw.get("cross_holder_reference", False) and mc.num_classes >= 2:
            ref_method = method.replace("jachess", "cross-holder")
            references[ref_method] = T.run_suite([ref_method], cfg.seeds, {task.name: (mc, splits)},
                                                 cfg.train, workers=cfg.workers)
        for strategy in strategies:
            for d in dims:
                rc = replace(cfg.train.regularizer, strategy=strategy, hessian_dims=int(d))
                tc = replace(cfg.train, regularizer=rc)
                recs = T.run_suite([method], cfg.seeds, {task.name: (mc, splits)}, tc,
                                   workers=cfg.workers)
                cells.append(_sweep_cell(task, strategy, int(d), method, recs, splits))
                timings[f"{task.name}/{strategy}/{d}"] = round(sum(r.wall_time for r in recs), 3)
        for ref_method, recs in references.items():
            cells.append(_sweep_cell(task, "reference", 0, ref_method, recs, splits))
    table = {"version": E.REPORT_VERSION, "cells": cells}
    if "json" in cfg.report_formats:
        _dump(out / "sweep.json", table)
    if "csv" in cfg.report_formats:
        lines = ["task,method,strategy,hessian_dims,metric,mean_score,scores"]
        for c in cells:
            lines.append(",".join([c["task"], c["method"], c["strategy"], str(c["hessian_dims"]),
                                   c["metric"], repr(c["mean_score"]),
                                   " ".join(repr(s) for s in c["scores"])]))
        (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(out, cfg, "sweep", timings)
    return table


def _sweep_cell(task, strategy, dims, method, recs, splits):
    scores = [E.clean_score(r.checkpoint, splits.test, task.task_metric) for r in recs]
    return {"task": task.name, "strategy": strategy, "hessian_dims": dims, "method": method,
            "metric": task.task_metric, "seeds": [r.seed for r in recs], "scores": scores,
            "mean_score": float(np.mean(scores)),
            "final_omega": float(np.mean([r.omega_history[-1] for r in recs]))}


def _diagnose_data(spec_str, vocab_size, data_seed):
    if Path(spec_str).exists():
        return D.load_tsv(spec_str, D.TsvSchema(), vocab_size).train
    if spec_str.startswith("pair:") and Path(spec_str[5:]).exists():
        return D.load_tsv(spec_str[5:], D.TsvSchema(pair=True), vocab_size).train
    try:
        return D.generate_task(D.get_task(spec_str), seed=data_seed).test
    except D.DataError:
        raise D.DataError(f"{spec_str!r} is neither a readable TSV file nor a known task") from None


def cmd_diagnose(ckpt_path, data_spec, *, instances=1, projections=1000, xi=1e-3,
                 hessian_dims=3, seed=0, output=None):
    ckpt_path = Path(ckpt_path)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt_path}")
    ck = load_checkpoint(ckpt_path)
    examples = _diagnose_data(data_spec, ck.config.vocab_size, seed)[:instances]
    ids, lengths = encode_batch([ex.tokens() for ex in examples], ck.config)
    trace = forward_ids(ck, ids, lengths, second_order=True)
    sampler = est.ProjectionSampler(seed=seed, stream=7)
    layers = []
    for k in range(1, len(trace.layers) + 1):
        width = trace.layers[k - 1].shape[1]
        dims = [int(d) for d in sampler.choice(width, min(hessian_dims, width))]
        jac = est.jacobian_frob_sq(trace, k, sampler, projections)
        hess = {d: est.hessian_frob_sq(trace, k, d, sampler, projections) for d in dims}
        row = {"layer": k, "jacobian_sq": asdict(jac),
               "hessian_sq": {str(d): asdict(h) for d, h in hess.items()}}
        try:
            row["oracle_jacobian_sq"] = float(np.mean(
                [(est.exact_jacobian(trace, k, i) ** 2).sum() for i in range(len(examples))]))
            row["oracle_hessian_sq"] = {str(d): float(np.mean(
                [(est.exact_hessian(trace, k, d, i) ** 2).sum() for i in range(len(examples))]))
                for d in dims}
            row["oracle"] = "exact"
        except est.OracleSizeError as exc:
            row["oracle"] = f"skipped: {exc}"
        layers.append(row)
    j = np.sqrt([row["jacobian_sq"]["value"] for row in layers])
    lambdas = {}
    for s in R.STRATEGIES:
        try:
            lambdas[s] = R.allocate_lambdas(j, xi, s).tolist()
        except R.RegularizerError as exc:
            lambdas[s] = f"unavailable: {exc}"
    result = {"checkpoint": str(ckpt_path), "instances": len(examples), "projections": projections,
              "xi": xi, "profile_j": j.tolist(), "layers": layers, "lambdas": lambdas}
    if output:
        out = Path(output)
        out.parent.mkdir(parents=True, exist_ok=True)
        _dump(out, result)
    return result


# ------------------------------------------------------------------ entry point


def build_parser():
    p = argparse.ArgumentParser(prog="jachess", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every task x method x seed in a config")
    t.add_argument("config")
    t.add_argument("--output", help="override output_dir")
    t.add_argument("--seed", type=int, action="append", help="override the seed list (repeatable)")

    e = sub.add_parser("eval", help="evaluate trained checkpoints")
    e.add_argument("ckpt_dir")
    e.add_argument("config")
    e.add_argument("--output", help="write reports here instead of ckpt_dir")
    e.add_argument("--seed", type=int, action="append")

    s = sub.add_parser("sweep", help="strategy x Hessian-dimension ablation grid")
    s.add_argument("config")
    s.add_argument("--output")
    s.add_argument("--seed", type=int, action="append")

    d = sub.add_parser("diagnose", help="per-layer smoothness estimates next to exact oracles")
    d.add_argument("checkpoint")
    d.add_argument("data", help="TSV path (prefix 'pair:' for pair files) or synthetic task name")
    d.add_argument("--instances", type=int, default=1)
    d.add_argument("--projections", type=int, default=1000)
    d.add_argument("--xi", type=float, default=1e-3)
    d.add_argument("--hessian-dims", type=int, default=3)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--output", help="write JSON here instead of stdout")
    return p


def _with_seeds(cfg, seeds):
    if seeds:
        cfg.seeds = list(seeds)
        cfg.raw = {**cfg.raw, "seeds": list(seeds)}
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "diagnose":
            res = cmd_diagnose(args.checkpoint, args.data, instances=args.instances,
                               projections=args.projections, xi=args.xi,
                               hessian_dims=args.hessian_dims, seed=args.seed, output=args.output)
            if not args.output:
                print(json.dumps(res, indent=1, sort_keys=True))
            return EXIT_OK
        cfg = _with_seeds(load_config(args.config), args.seed)
        if args.command == "train":
            cmd_train(cfg, args.output)
        elif args.command == "eval":
            cmd_eval(args.ckpt_dir, cfg, args.output)
        else:
            cmd_sweep(cfg, args.output)
        return EXIT_OK
    except ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, T.TrainError, R.RegularizerError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level category mapping
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
