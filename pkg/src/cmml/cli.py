"""Command-line experiment runner.

    cmml run CONFIG [--out DIR] [--seed-override S] [--jobs J]
    cmml gen-data SPEC OUT_DIR
    cmml grad-check [--instances K]

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checks import run_checks
from .data import SyntheticSpec, gen_synthetic, load_stream, write_stream
from .evaluation import session_summary
from .trainer import ConfigError, TrainConfig, run_stream

log = logging.getLogger("cmml")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
STREAM_KEYS = ("num_tasks", "test_classes")
FILE_KEYS = ("train", "query", "gallery")


@dataclass
class MethodRun:
    name: str
    train: TrainConfig


@dataclass
class ExperimentConfig:
    data: dict
    methods: list[MethodRun]
    seeds: list[int]
    output_dir: Path

    def resolved(self) -> dict:
        return {
            "data": self.data,
            "methods": [{"name": m.name, **m.train.to_dict()} for m in self.methods],
            "seeds": self.seeds,
            "output_dir": str(self.output_dir),
        }


def _expect(cond, path, msg):
    if not cond:
        raise ConfigError(path, msg)


def parse_data(raw, base_dir: Path) -> dict:
    raw = {"synthetic": {}} if raw is None else raw
    _expect(isinstance(raw, dict), "data", "must be an object")
    kinds = [k for k in raw if k in ("synthetic", "files")]
    _expect(len(kinds) == 1 and len(raw) == 1, "data", "needs exactly one of 'synthetic' or 'files'")
    if "files" in raw:
        files = raw["files"]
        _expect(isinstance(files, dict), "data.files", "must be an object")
        out = {}
        for key in FILE_KEYS:
            _expect(key in files, f"data.files.{key}", "missing")
            path = Path(files[key])
            path = path if path.is_absolute() else base_dir / path
            _expect(path.is_file(), f"data.files.{key}", f"no such file: {path}")
            out[key] = str(path)
        for key in files:
            _expect(key in FILE_KEYS, f"data.files.{key}", "unknown field")
        return {"files": out}

    syn = raw["synthetic"]
    _expect(isinstance(syn, dict), "data.synthetic", "must be an object")
    known = {f.name for f in fields(SyntheticSpec)} | set(STREAM_KEYS)
    for key in syn:
        _expect(key in known, f"data.synthetic.{key}", "unknown field")
    spec_fields = {k: v for k, v in syn.items() if k not in STREAM_KEYS}
    try:
        spec = SyntheticSpec(**spec_fields)
    except TypeError as err:
        raise ConfigError("data.synthetic", str(err)) from None
    num_tasks, test_classes = syn.get("num_tasks", 5), syn.get("test_classes", 20)
    for key, value in (("num_tasks", num_tasks), ("test_classes", test_classes)):
        _expect(isinstance(value, int) and value >= 1, f"data.synthetic.{key}", "must be an integer >= 1")
    try:
        spec.validate(num_tasks, test_classes)
    except ValueError as err:
        raise ConfigError("data.synthetic", str(err)) from None
    return {"synthetic": {**spec.to_dict(), "num_tasks": num_tasks, "test_classes": test_classes}}


def parse_experiment(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    _expect(isinstance(raw, dict), "<root>", "config must be a JSON object")
    for key in raw:
        _expect(key in ("data", "train", "methods", "seeds", "output_dir"), key, "unknown field")
    data = parse_data(raw.get("data"), base_dir)

    base = raw.get("train", {})
    _expect(isinstance(base, dict), "train", "must be an object")
    methods_raw = raw.get("methods")
    _expect(isinstance(methods_raw, list) and methods_raw, "methods", "must be a non-empty list")
    methods, names = [], set()
    for i, entry in enumerate(methods_raw):
        path = f"methods[{i}]"
        if isinstance(entry, str):
            entry = {"method": entry}
        _expect(isinstance(entry, dict), path, "must be a method name or an object")
        entry = dict(entry)
        name = entry.pop("name", None)
        cfg = TrainConfig.from_dict({**base, **entry}, path)
        name = name or cfg.label
        _expect(name not in names, f"{path}.name", f"duplicate method name {name!r}")
        names.add(name)
        methods.append(MethodRun(name, cfg))

    seeds = raw.get("seeds", [0])
    _expect(isinstance(seeds, list) and seeds, "seeds", "must be a non-empty list")
    for i, s in enumerate(seeds):
        _expect(isinstance(s, int) and not isinstance(s, bool), f"seeds[{i}]", "must be an integer")
    _expect(len(set(seeds)) == len(seeds), "seeds", "seeds must be distinct")
    out = raw.get("output_dir", "results")
    _expect(isinstance(out, str), "output_dir", "must be a string")
    out = Path(out)
    return ExperimentConfig(data, methods, list(seeds), out if out.is_absolute() else base_dir / out)


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"no such config file: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError("<file>", f"invalid JSON at line {err.lineno}: {err.msg}") from None
    return parse_experiment(raw, path.parent)


def build_stream(data: dict):
    if "files" in data:
        f = data["files"]
        return load_stream(f["train"], f["query"], f["gallery"])
    syn = dict(data["synthetic"])
    num_tasks, test_classes = syn.pop("num_tasks"), syn.pop("test_classes")
    return gen_synthetic(SyntheticSpec(**syn), num_tasks, test_classes)


def run_one(job) -> dict:
    """One (method, seed) run; top level so worker processes can import it."""
    name, train, seed, data = job
    cfg = TrainConfig.from_dict({**train, "seed": seed})
    start = time.perf_counter()
    reports, _ = run_stream(build_stream(data), cfg)
    summary = session_summary(reports)
    return {
        "method": name,
        "seed": seed,
        "sessions": [{"task": r.task, "mAP": r.mAP, "rank1": r.rank1} for r in reports],
        "last": {m: summary[m]["last"] for m in ("mAP", "rank1")},
        "avg": {m: summary[m]["avg"] for m in ("mAP", "rank1")},
        "seconds": time.perf_counter() - start,
    }


def _mean_std(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std())}


def assemble_results(exp: ExperimentConfig, runs: dict, errors: list) -> dict:
    """Results document; wall-clock numbers live only under ``timing``."""
    methods, timing = {}, {}
    for m in exp.methods:
        per_seed = {}
        for seed in exp.seeds:
            run = runs.get((m.name, seed))
            if run is None:
                continue
            per_seed[str(seed)] = {k: run[k] for k in ("sessions", "last", "avg")}
            timing[f"{m.name}/seed={seed}"] = run["seconds"]
        entry = {"config": m.train.to_dict(), "seeds": per_seed}
        if per_seed:
            entry["summary"] = {
                metric: {agg: _mean_std([r[agg][metric] for r in per_seed.values()]) for agg in ("last", "avg")}
                for metric in ("mAP", "rank1")
            }
        methods[m.name] = entry
    return {
        "complete": not errors and len(runs) == len(exp.methods) * len(exp.seeds),
        "methods": methods,
        "errors": errors,
        "timing": timing,
    }


def write_outputs(exp: ExperimentConfig, runs: dict, errors: list) -> dict:
    out = exp.output_dir
    out.mkdir(parents=True, exist_ok=True)
    results = assemble_results(exp, runs, errors)
    (out / "results.json").write_text(json.dumps(results, indent=2) + "\n")
    with open(out / "curves.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "seed", "session", "mAP", "rank1"])
        for m in exp.methods:
            for seed in exp.seeds:
                run = runs.get((m.name, seed))
                for s in run["sessions"] if run else []:
                    w.writerow([m.name, seed, s["task"], repr(s["mAP"]), repr(s["rank1"])])
    return results


def run_experiment(exp: ExperimentConfig, jobs: int = 1) -> tuple[dict, int]:
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    (exp.output_dir / "config.resolved.json").write_text(json.dumps(exp.resolved(), indent=2) + "\n")
    work = [(m.name, m.train.to_dict(), seed, exp.data) for m in exp.methods for seed in exp.seeds]
    runs, errors = {}, []

    def record(job, fn):
        try:
            run = fn()
        except Exception as err:  # a failed run is reported, the rest continue
            log.error("%s seed %d failed: %s", job[0], job[2], err)
            errors.append({"method": job[0], "seed": job[2], "error": f"{type(err).__name__}: {err}",
                           "traceback": traceback.format_exc()})
        else:
            runs[(job[0], job[2])] = run
            log.info("%s seed %d: avg mAP %.4f, last %.4f", job[0], job[2], run["avg"]["mAP"], run["last"]["mAP"])
        write_outputs(exp, runs, errors)  # flush after every run

    if jobs <= 1:
        for job in work:
            record(job, lambda job=job: run_one(job))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(job, pool.submit(run_one, job)) for job in work]
            for job, fut in futures:
                record(job, fut.result)
    results = write_outputs(exp, runs, errors)
    return results, EXIT_OK if results["complete"] else EXIT_RUNTIME


# --------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    try:
        exp = load_experiment(args.config)
        if args.seed_override is not None:
            exp.seeds = [args.seed_override]
        if args.out is not None:
            exp.output_dir = Path(args.out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        results, code = run_experiment(exp, args.jobs)
    except OSError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, entry in results["methods"].items():
        if "summary" in entry:
            s = entry["summary"]["mAP"]
            print(f"{name:28s} avg mAP {s['avg']['mean']:.4f} ± {s['avg']['std']:.4f}   "
                  f"last mAP {s['last']['mean']:.4f} ± {s['last']['std']:.4f}")
    for e in results["errors"]:
        print(f"runtime error: {e['method']} seed {e['seed']}: {e['error']}", file=sys.stderr)
    print(f"results written to {exp.output_dir}")
    return code


def cmd_gen_data(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
        data = parse_data({"synthetic": raw}, Path("."))
    except (OSError, json.JSONDecodeError) as err:
        print(f"config error: {args.spec}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        paths = write_stream(build_stream(data), args.out_dir)
        Path(args.out_dir, "spec.resolved.json").write_text(json.dumps(data["synthetic"], indent=2) + "\n")
    except OSError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    for role, path in paths.items():
        print(f"{role:8s} {path}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_checks(args.instances, args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:24s} {r.instances:4d} instances  max rel err {r.max_rel_error:.2e}  {status}")
    bad = [r.name for r in results if not r.passed]
    if bad:
        print(f"{len(bad)} check(s) failed: {', '.join(bad)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmml", description="Continual meta metric learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate every (method, seed) in a JSON config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--seed-override", type=int, help="run this single seed instead of the configured list")
    r.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen-data", help="write a synthetic stream as train/query/gallery CSV files")
    g.add_argument("spec", help="JSON with synthetic generator fields, num_tasks and test_classes")
    g.add_argument("out_dir")
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("grad-check", help="finite-difference check of every primitive and loss")
    c.add_argument("--instances", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
