"""Command-line entry point: ``mingle {gen,run,ablate,theory,report}``.

Every tunable lives in :class:`RunConfig`. A JSON config file (``--config``)
supplies a base, and any flag overrides it. Outputs are written to a temp
file and renamed into place, so a failed command leaves nothing half
written.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from mingle import bench, theory
from mingle.mergers import METHODS
from mingle.nullspace import TRACE_COLUMNS

log = logging.getLogger("mingle")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class ValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    # suite
    n_tasks: int = 4
    classes_per_task: int = 3
    dim: int = 16
    samples_per_class: int = 100
    test_per_class: int = 200
    margin: float = 1.0
    shift: float = 1.5
    noise: float = 0.1
    scale: float = 150.0
    suite_seed: int = 0
    # backbone and fine-tuning
    hidden: list = field(default_factory=lambda: [32, 32])
    feature_dim: int = 32
    temperature: float = 20.0
    finetune_steps: int = 200
    finetune_lr: float = 0.2
    # mingle
    rank: int = 4
    k: int = 3
    gamma: float = 1.0
    beta: float = 0.99
    steps: int = 50
    lr: float = 1e-4
    batch_size: int = 16
    seeds_per_class: int = 5
    constraint: str = "relaxed"
    # baselines
    ta_scale: float = 0.3
    ties_scale: float = 1.0
    trim_fraction: float = 0.2
    magmax_scale: float = 1.0
    opcm_rule: str = "sqrt"
    # sweep
    method: list = field(default_factory=lambda: ["mingle"])
    orders: int = 1
    seeds: list = field(default_factory=lambda: [0])
    jobs: int = 1
    out: str = "runs"
    suite: str = ""

    def validate(self) -> RunConfig:
        positive = ("n_tasks", "classes_per_task", "samples_per_class", "test_per_class",
                    "feature_dim", "finetune_steps", "rank", "k", "steps", "batch_size", "seeds_per_class",
                    "orders", "jobs")
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        if self.dim < 3:
            raise ValidationError("dim must be at least 3")
        for name in ("margin", "scale", "temperature", "finetune_lr", "gamma", "lr",
                     "ta_scale", "ties_scale", "magmax_scale"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.noise < 0 or self.shift < 0:
            raise ValidationError("noise and shift must be non-negative")
        if not 0 <= self.beta < 1:
            raise ValidationError("beta must lie in [0, 1)")
        if not 0 < self.trim_fraction <= 1:
            raise ValidationError("trim_fraction must lie in (0, 1]")
        if self.opcm_rule not in ("sqrt", "linear", "const"):
            raise ValidationError(f"unknown opcm_rule {self.opcm_rule!r}")
        if self.constraint not in ("relaxed", "hard", "none"):
            raise ValidationError(f"unknown constraint {self.constraint!r}")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise ValidationError("hidden sizes must be positive")
        if self.rank > min([self.dim, *self.hidden, self.feature_dim]):
            raise ValidationError("rank exceeds the smallest layer width")
        if self.k > min([self.dim, *self.hidden, self.feature_dim]):
            raise ValidationError("k exceeds the smallest layer width")
        if self.seeds_per_class > self.test_per_class:
            raise ValidationError("seeds_per_class exceeds the test pool")
        bad = [m for m in self.method if m not in METHODS]
        if bad or not self.method:
            raise ValidationError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ValidationError("seeds must be non-negative integers")
        return self

    def suite_kwargs(self) -> dict:
        return dict(n_tasks=self.n_tasks, classes_per_task=self.classes_per_task, dim=self.dim,
                    samples_per_class=self.samples_per_class, test_per_class=self.test_per_class,
                    margin=self.margin, shift=self.shift, noise=self.noise, scale=self.scale,
                    seed=self.suite_seed)

    def bench_config(self) -> bench.BenchConfig:
        return bench.BenchConfig(
            hidden=tuple(int(h) for h in self.hidden), feature_dim=self.feature_dim,
            temperature=self.temperature,
            finetune_steps=self.finetune_steps, finetune_lr=self.finetune_lr,
            ta_scale=self.ta_scale, ties_scale=self.ties_scale,
            trim_fraction=self.trim_fraction, magmax_scale=self.magmax_scale,
            opcm_rule=self.opcm_rule,
            mingle=bench.MingleConfig(rank=self.rank, k=self.k, gamma=self.gamma,
                                      beta=self.beta, steps=self.steps, lr=self.lr,
                                      batch_size=self.batch_size,
                                      seeds_per_class=self.seeds_per_class,
                                      constraint=self.constraint),
        )

    def suite_path(self) -> Path:
        return Path(self.suite) if self.suite else Path(self.out) / "suite.json"


_LIST_FIELDS = {"hidden": int, "method": str, "seeds": int}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser, skip=()):
    p.add_argument("--config", help="JSON file with RunConfig fields")
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        if f.name in _LIST_FIELDS:
            p.add_argument(_flag(f.name), dest=f.name, default=None,
                           help=f"comma-separated list ({f.name})")
        else:
            kind = type(getattr(RunConfig(), f.name))
            p.add_argument(_flag(f.name), dest=f.name, type=kind, default=None)


def _parse_list(name: str, text: str) -> list:
    conv = _LIST_FIELDS[name]
    items = [s.strip() for s in text.split(",") if s.strip()]
    if name == "method" and items == ["all"]:
        return [m for m in METHODS]
    try:
        return [conv(s) for s in items]
    except ValueError:
        raise ValidationError(f"cannot parse --{name} {text!r}") from None


def build_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig()
    doc: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = set(doc) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    values = asdict(base)
    values.update(doc)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is None:
            continue
        values[f.name] = _parse_list(f.name, v) if f.name in _LIST_FIELDS else v
    if isinstance(values["method"], str):
        values["method"] = _parse_list("method", values["method"])
    return RunConfig(**values).validate()


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _commit(files: dict) -> None:
    """Write all outputs only once everything has been computed."""
    for path, text in files.items():
        atomic_write(path, text)


def _load_suite(cfg: RunConfig) -> bench.TaskSuite:
    path = cfg.suite_path()
    try:
        with open(path) as fh:
            return bench.TaskSuite.from_dict(json.load(fh))
    except FileNotFoundError:
        raise ValidationError(f"suite file {path} not found; run `mingle gen` first") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"malformed suite file {path}: {exc}") from None


def _report_text(report: bench.RunReport, cfg: RunConfig) -> str:
    # execution-only settings stay out so reports match across --jobs / --out
    echoed = {k: v for k, v in asdict(cfg).items() if k not in ("jobs", "out", "suite")}
    report.config = dict(report.config, run_config=echoed)
    return report.to_json() + "\n"


def cmd_gen(cfg: RunConfig) -> int:
    suite = bench.generate_suite(**cfg.suite_kwargs())
    path = cfg.suite_path()
    _commit({path: json.dumps(suite.to_dict()) + "\n"})
    print(f"wrote {path} (checksum {suite.checksum()[:16]})")
    return EXIT_OK


def _trace_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "order_index", "seed", "position", *TRACE_COLUMNS))
    for r in rows:
        w.writerow(r[:5] + tuple(f"{x:.10g}" for x in r[5:]))
    return buf.getvalue()


def cmd_run(cfg: RunConfig, trace_path: str | None = None) -> int:
    suite = _load_suite(cfg)
    orders = bench.order_permutations(suite.n_tasks, cfg.orders)
    spec = [((m, j, s), m, orders[j], s, {})
            for m in cfg.method for j in range(cfg.orders) for s in cfg.seeds]
    results = bench.run_sweep(suite, spec, cfg.bench_config(), cfg.jobs,
                              collect_trace=trace_path is not None)
    out = Path(cfg.out)
    files, timings, trace_rows = {}, {}, []
    by_method: dict = {m: [] for m in cfg.method}
    for (m, j, s), report, trace in results:
        name = f"{m}_order{j}_seed{s}"
        files[out / "reports" / f"{name}.json"] = _report_text(report, cfg)
        timings[name] = report.wall_time
        by_method[m].append(report)
        for row in trace or ():
            trace_rows.append((m, j, s, *row))
    rows = [(m, suite.n_tasks, bench.aggregate(r)) for m, r in by_method.items()]
    files[out / "aggregate.csv"] = bench.aggregate_csv(rows)
    files[out / "timings.json"] = json.dumps(timings, indent=1, sort_keys=True) + "\n"
    if trace_path:
        files[Path(trace_path)] = _trace_csv(trace_rows)
    _commit(files)
    sys.stdout.write(files[out / "aggregate.csv"])
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    suite = _load_suite(cfg)
    orders = bench.order_permutations(suite.n_tasks, cfg.orders)
    spec = [((r, j, s), "mingle", orders[j], s, ov)
            for r, ov in bench.ABLATION_ROWS.items() for j in range(cfg.orders) for s in cfg.seeds]
    results = bench.run_sweep(suite, spec, cfg.bench_config(), cfg.jobs)
    out = Path(cfg.out)
    files, timings = {}, {}
    by_row: dict = {r: [] for r in bench.ABLATION_ROWS}
    for (r, j, s), report, _ in results:
        name = f"{r}_order{j}_seed{s}"
        files[out / "ablation" / f"{name}.json"] = _report_text(report, cfg)
        timings[name] = report.wall_time
        by_row[r].append(report)
    rows = [(r, suite.n_tasks, bench.aggregate(v)) for r, v in by_row.items()]
    files[out / "ablation.csv"] = bench.aggregate_csv(rows, key="row")
    files[out / "ablation_timings.json"] = json.dumps(timings, indent=1, sort_keys=True) + "\n"
    _commit(files)
    sys.stdout.write(files[out / "ablation.csv"])
    return EXIT_OK


def _world_from_dict(doc: dict) -> theory.DiscreteTaskWorld:
    return theory.DiscreteTaskWorld(doc["priors"], doc["labels"], doc["outputs"],
                                    doc.get("weights"))


def cmd_theory(path: str, draws: int, resolution: int, seed: int) -> int:
    if draws < 1 or resolution < 2:
        raise ValidationError("--draws must be >= 1 and --resolution >= 2")
    try:
        with open(path) as fh:
            doc = json.load(fh)
        world = _world_from_dict(doc["world"]) if "world" in doc else None
        if world is not None and "risk_matrix" not in doc:
            spec = world.risk_spec(doc["routing_errors"])
        else:
            spec = theory.RiskSpec.from_dict(doc)
        if spec.n_tasks < 2:
            raise ValidationError("at least two tasks are required")
    except FileNotFoundError:
        raise ValidationError(f"spec file {path} not found") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid risk spec {path}: {exc}") from None
    result = {
        "ideal_risk": theory.ideal_risk(spec),
        "moe_risk": theory.moe_risk_closed_form(spec),
    }
    mc, se = theory.moe_risk_monte_carlo(spec, draws, rng_seed=seed)
    result["monte_carlo"] = {"estimate": mc, "stderr": se, "draws": draws}
    if "static_risk" in doc:
        static, weights = float(doc["static_risk"]), None
    elif world is not None:
        static, w = theory.static_optimal_risk(world, resolution)
        weights = w.tolist()
    else:
        static = weights = None
    if static is not None:
        result["static_risk"] = static
        if weights is not None:
            result["static_weights"] = weights
        result["gap"] = static - result["ideal_risk"]
        result["routing_penalty"] = theory.routing_penalty(spec)
        result["superiority"] = theory.superiority_condition(spec, static)
    print(json.dumps(result, indent=1))
    return EXIT_OK


def cmd_report(out_dir: str) -> int:
    out = Path(out_dir)
    groups: dict = {}
    for sub, key in (("reports", "method"), ("ablation", "row")):
        for path in sorted((out / sub).glob("*.json")):
            with open(path) as fh:
                doc = json.load(fh)
            report = bench.RunReport.from_dict(doc)
            acc, bwt = bench.compute_metrics(report.matrix)
            if abs(acc - report.acc) > 1e-12 or abs(bwt - report.bwt) > 1e-12:
                raise RuntimeError(f"{path}: stored metrics disagree with its matrix")
            label = path.stem.split("_order")[0]
            groups.setdefault(key, {}).setdefault(label, []).append(report)
    if not groups:
        raise ValidationError(f"no reports under {out}")
    for key, table in groups.items():
        rows = [(name, len(reps[0].order), bench.aggregate(reps)) for name, reps in table.items()]
        sys.stdout.write(bench.aggregate_csv(rows, key=key))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mingle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_config_flags(sub.add_parser("gen", help="generate a task suite"))
    p = sub.add_parser("run", help="continual merging sweep")
    _add_config_flags(p)
    p.add_argument("--trace", help="CSV file for MINGLE gate-update diagnostics")
    _add_config_flags(sub.add_parser("ablate", help="component ablation grid"))
    p = sub.add_parser("theory", help="evaluate a risk spec")
    p.add_argument("spec")
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--resolution", type=int, default=101)
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("report", help="re-aggregate stored reports")
    p.add_argument("--out", default="runs")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    start = time.perf_counter()
    try:
        if args.command == "theory":
            code = cmd_theory(args.spec, args.draws, args.resolution, args.seed)
        elif args.command == "report":
            code = cmd_report(args.out)
        else:
            cfg = build_config(args)
            if args.command == "gen":
                code = cmd_gen(cfg)
            elif args.command == "run":
                code = cmd_run(cfg, args.trace)
            else:
                code = cmd_ablate(cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
