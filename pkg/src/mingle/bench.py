"""Synthetic continual-merging benchmark.

Each task is a 3-class Gaussian-cluster problem. All tasks place their class
means on a shared 2-d plane (at task-specific angles, so task vectors
conflict) and add a task-specific domain offset orthogonal to that plane (so
a linear gate can tell tasks apart). Inputs are scaled up so that gate
outputs reach O(1) within a short, small-learning-rate adaptation.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from mingle.estimators import (
    MagMaxMerger,
    MingleMerger,
    OPCMMerger,
    SWAMerger,
    TaskArithmeticMerger,
    TiesMerger,
)
from mingle.model import LabeledBatch, finetune, init_model, random_head

ABLATION_ROWS = {
    "no_tta": dict(tta=False),
    "tta_unfrozen": dict(tta=True, freeze_old_gates=False, constraint="none"),
    "tta_frozen": dict(tta=True, freeze_old_gates=True, constraint="none"),
    "hard": dict(tta=True, freeze_old_gates=True, constraint="hard"),
    "relaxed": dict(tta=True, freeze_old_gates=True, constraint="relaxed"),
}


@dataclass
class Task:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train_x", "train_y", "test_x", "test_y", "classes")}

    @classmethod
    def from_dict(cls, doc: dict) -> Task:
        return cls(np.array(doc["train_x"], dtype=np.float64), np.array(doc["train_y"], dtype=np.int64),
                   np.array(doc["test_x"], dtype=np.float64), np.array(doc["test_y"], dtype=np.int64),
                   np.array(doc["classes"], dtype=np.int64))


@dataclass
class TaskSuite:
    tasks: list[Task]
    params: dict

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0].train_x.shape[1]

    @property
    def n_classes(self) -> int:
        return int(sum(t.classes.size for t in self.tasks))

    def to_dict(self) -> dict:
        return {"params": self.params, "tasks": [t.to_dict() for t in self.tasks]}

    @classmethod
    def from_dict(cls, doc: dict) -> TaskSuite:
        return cls([Task.from_dict(t) for t in doc["tasks"]], doc["params"])

    def checksum(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict()).encode()).hexdigest()


def generate_suite(
    n_tasks: int = 4,
    classes_per_task: int = 3,
    dim: int = 16,
    samples_per_class: int = 100,
    test_per_class: int = 200,
    margin: float = 1.0,
    shift: float = 1.5,
    noise: float = 0.1,
    scale: float = 150.0,
    seed: int = 0,
) -> TaskSuite:
    """Gaussian-cluster tasks with disjoint class blocks; deterministic in ``seed``.

    ``margin`` is the radius of the class means on the shared plane relative
    to the within-class ``noise``; ``shift`` the length of each task's
    domain offset.
    """
    for name, v in (("n_tasks", n_tasks), ("classes_per_task", classes_per_task),
                    ("samples_per_class", samples_per_class), ("test_per_class", test_per_class)):
        if v < 1:
            raise ValueError(f"{name} must be positive")
    if dim < 3:
        raise ValueError("dim must be at least 3")
    params = dict(n_tasks=n_tasks, classes_per_task=classes_per_task, dim=dim,
                  samples_per_class=samples_per_class, test_per_class=test_per_class,
                  margin=margin, shift=shift, noise=noise, scale=scale, seed=seed)
    rng = np.random.default_rng(seed)
    frame, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    plane, rest = frame[:, :2], frame[:, 2:]
    tasks = []
    for t in range(n_tasks):
        offset = rest @ rng.standard_normal(dim - 2)
        offset /= np.linalg.norm(offset)
        angles = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(classes_per_task) / classes_per_task
        means = shift * offset + margin * (np.outer(np.cos(angles), plane[:, 0])
                                           + np.outer(np.sin(angles), plane[:, 1]))

        def draw(n):
            x = np.concatenate([means[c] + noise * rng.standard_normal((n, dim))
                                for c in range(classes_per_task)])
            return scale * x, np.repeat(np.arange(classes_per_task), n)

        train_x, train_y = draw(samples_per_class)
        test_x, test_y = draw(test_per_class)
        classes = np.arange(t * classes_per_task, (t + 1) * classes_per_task)
        tasks.append(Task(train_x, train_y, test_x, test_y, classes))
    return TaskSuite(tasks, params)


@dataclass
class MingleConfig:
    rank: int = 4
    k: int = 3
    gamma: float = 1.0
    beta: float = 0.99
    steps: int = 50
    lr: float = 1e-4
    batch_size: int = 16
    seeds_per_class: int = 5
    constraint: str = "relaxed"
    tta: bool = True
    freeze_old_gates: bool = True
    update_bias: bool = True


@dataclass
class BenchConfig:
    """Everything a run needs besides the suite, the method and the order."""

    hidden: tuple = (32, 32)
    feature_dim: int = 32
    temperature: float = 20.0
    finetune_steps: int = 200
    finetune_lr: float = 0.2
    ta_scale: float = 0.3
    ties_scale: float = 1.0
    trim_fraction: float = 0.2
    magmax_scale: float = 1.0
    opcm_rule: str = "sqrt"
    mingle: MingleConfig = field(default_factory=MingleConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> BenchConfig:
        doc = dict(doc)
        doc["hidden"] = tuple(doc.get("hidden", (32, 32)))
        doc["mingle"] = MingleConfig(**doc.get("mingle", {}))
        return cls(**doc)


@dataclass
class RunReport:
    method: str
    order: list[int]
    seed: int
    matrix: list[list[float | None]]
    acc: float
    bwt: float
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self) -> str:
        # wall time is kept out so reports are byte-reproducible
        doc = {k: v for k, v in asdict(self).items() if k != "wall_time"}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> RunReport:
        return cls(**{k: doc[k] for k in ("method", "order", "seed", "matrix", "acc", "bwt")},
                   config=doc.get("config", {}), wall_time=doc.get("wall_time", 0.0))


def compute_metrics(matrix) -> tuple[float, float]:
    """ACC = mean of the final row; BWT = mean drop from the diagonal to the final row."""
    a = np.array([[np.nan if v is None else v for v in row] for row in matrix], dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise ValueError("accuracy matrix must be square and non-empty")
    t = a.shape[0]
    if np.any(np.isnan(a[np.tril_indices(t)])):
        raise ValueError("accuracy matrix is incomplete")
    acc = float(np.mean(a[-1]))
    if t == 1:
        return acc, 0.0
    return acc, float(np.mean(a[-1, :-1] - np.diag(a)[:-1]))


_FINETUNE_CACHE: dict = {}


def pretrained(suite: TaskSuite, config: BenchConfig, seed: int):
    """Shared initialisation ``theta_0`` and frozen prototype head for a run seed."""
    rng = np.random.default_rng([seed, 0x5EED])
    sizes = [suite.dim, *config.hidden, config.feature_dim]
    base = init_model(sizes, rng)
    head = random_head(suite.n_classes, sizes[-1], rng, config.temperature)
    return base, head


def finetuned_models(suite: TaskSuite, config: BenchConfig, seed: int):
    key = (suite.checksum(), seed, config.finetune_steps, config.finetune_lr,
           tuple(config.hidden), config.feature_dim, config.temperature)
    if key not in _FINETUNE_CACHE:
        base, head = pretrained(suite, config, seed)
        models = [finetune(base, head.subset(t.classes), LabeledBatch(t.train_x, t.train_y),
                           config.finetune_steps, config.finetune_lr, rng_seed=seed * 1000 + i)
                  for i, t in enumerate(suite.tasks)]
        _FINETUNE_CACHE.clear()
        _FINETUNE_CACHE[key] = (base, head, models)
    return _FINETUNE_CACHE[key]


def seed_indices(suite: TaskSuite, seed: int, per_class: int) -> list[np.ndarray]:
    """Per task, ``per_class`` test indices per class drawn without replacement."""
    out = []
    for i, task in enumerate(suite.tasks):
        rng = np.random.default_rng([seed, i, 0xC0DE])
        idx = [rng.choice(np.flatnonzero(task.test_y == c), size=per_class, replace=False)
               for c in range(task.classes.size)]
        out.append(np.sort(np.concatenate(idx)))
    return out


def make_merger(method: str, base, head, config: BenchConfig, seed: int, **mingle_overrides):
    if method == "swa":
        return SWAMerger(base, head)
    if method == "ta":
        return TaskArithmeticMerger(base, head, scale=config.ta_scale)
    if method == "ties":
        return TiesMerger(base, head, scale=config.ties_scale, trim_fraction=config.trim_fraction)
    if method == "magmax":
        return MagMaxMerger(base, head, scale=config.magmax_scale)
    if method == "opcm":
        return OPCMMerger(base, head, scale_rule=config.opcm_rule)
    if method == "mingle":
        mc = asdict(config.mingle)
        mc.update(mingle_overrides)
        mc.pop("seeds_per_class")
        return MingleMerger(base, head, random_state=seed, **mc)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class RunContext:
    suite: TaskSuite
    order: list[int]
    seed: int
    merger: object
    eval_masks: list[np.ndarray]
    report: RunReport


def _eval_task(merger, task: Task, mask: np.ndarray, noise: float = 0.0, rng=None) -> float:
    x = task.test_x[mask]
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    return merger.score(x, task.classes[task.test_y[mask]], task.classes)


def run_continual(
    suite: TaskSuite,
    method: str,
    config: BenchConfig | None = None,
    order=None,
    seed: int = 0,
    return_context: bool = False,
    trace: list | None = None,
    **mingle_overrides,
):
    """Merge the fine-tuned task models in ``order``, evaluating after each step.

    For MINGLE, ``trace`` (a list) collects one row per projected gate
    update: ``(position, *TRACE_COLUMNS)``.
    """
    config = config or BenchConfig()
    t_count = suite.n_tasks
    order = list(range(t_count)) if order is None else [int(o) for o in order]
    if sorted(order) != list(range(t_count)):
        raise ValueError(f"order {order} is not a permutation of 0..{t_count - 1}")
    start = time.perf_counter()
    base, head, models = finetuned_models(suite, config, seed)
    seeds = seed_indices(suite, seed, config.mingle.seeds_per_class)
    masks = []
    for task, s in zip(suite.tasks, seeds):
        m = np.ones(task.test_y.size, dtype=bool)
        m[s] = False
        masks.append(m)
    merger = make_merger(method, base, head, config, seed, **mingle_overrides)
    matrix: list[list[float | None]] = [[None] * t_count for _ in range(t_count)]
    for step, ti in enumerate(order):
        task = suite.tasks[ti]
        if method == "mingle" and trace is not None:
            rows: list = []
            merger.partial_fit(models[ti], task.test_x[seeds[ti]], task.classes, trace=rows)
            trace.extend((step, *row) for row in rows)
        else:
            merger.partial_fit(models[ti], task.test_x[seeds[ti]], task.classes)
        for j in range(step + 1):
            tj = order[j]
            matrix[step][j] = _eval_task(merger, suite.tasks[tj], masks[tj])
    acc, bwt = compute_metrics(matrix)
    cfg = config.to_dict()
    cfg["mingle"].update(mingle_overrides)
    report = RunReport(method, order, seed, matrix, acc, bwt,
                       {"bench": cfg, "suite": suite.params},
                       wall_time=time.perf_counter() - start)
    if return_context:
        return report, RunContext(suite, order, seed, merger, masks, report)
    return report


def corruption_eval(context: RunContext, noise_sigma: float, seed: int = 0) -> RunReport:
    """Re-evaluate the final merged model with additive ``N(0, sigma^2)`` input noise."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng([seed, 0xBAD])
    matrix = [list(row) for row in context.report.matrix]
    last = len(matrix) - 1
    for j, tj in enumerate(context.order):
        matrix[last][j] = _eval_task(context.merger, context.suite.tasks[tj],
                                     context.eval_masks[tj], noise_sigma, rng)
    acc, bwt = compute_metrics(matrix)
    r = context.report
    config = dict(r.config, noise_sigma=noise_sigma)
    return RunReport(r.method, list(r.order), r.seed, matrix, acc, bwt, config)


def order_permutations(n_tasks: int, n_orders: int, first_seed: int = 42) -> list[list[int]]:
    """One permutation per seed ``first_seed, first_seed + 1, ...``."""
    return [np.random.default_rng(first_seed + j).permutation(n_tasks).tolist()
            for j in range(n_orders)]


def _run_job(job):
    suite, method, config, order, seed, overrides, tag, want_trace = job
    trace = [] if want_trace else None
    report = run_continual(suite, method, config, order, seed, trace=trace, **overrides)
    return tag, report, trace


def run_sweep(
    suite: TaskSuite,
    jobs_spec: list[tuple],
    config: BenchConfig | None = None,
    n_jobs: int = 1,
    collect_trace: bool = False,
) -> list[tuple]:
    """Run ``(tag, method, order, seed, overrides)`` jobs.

    Returns ``(tag, report, trace_or_None)`` sorted by tag. Every run is
    independent and seeded, so results do not depend on ``n_jobs``.
    """
    config = config or BenchConfig()
    if n_jobs <= 1:
        out = []
        for tag, m, o, s, ov in jobs_spec:
            trace = [] if collect_trace else None
            out.append((tag, run_continual(suite, m, config, o, s, trace=trace, **ov), trace))
    else:
        payload = [(suite, m, config, o, s, ov, tag, collect_trace)
                   for tag, m, o, s, ov in jobs_spec]
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            out = list(pool.map(_run_job, payload))
    return sorted(out, key=lambda x: x[0])


def aggregate(reports: list[RunReport]) -> dict:
    accs = np.array([r.acc for r in reports])
    bwts = np.array([r.bwt for r in reports])
    return {"ACC_mean": float(accs.mean()), "ACC_std": float(accs.std()),
            "BWT_mean": float(bwts.mean()), "BWT_std": float(bwts.std())}


def aggregate_csv(rows: list[tuple[str, int, dict]], key: str = "method") -> str:
    lines = [f"{key},T,ACC_mean,ACC_std,BWT_mean,BWT_std"]
    for name, t, agg in rows:
        lines.append(f"{name},{t},{agg['ACC_mean']:.6f},{agg['ACC_std']:.6f},"
                     f"{agg['BWT_mean']:.6f},{agg['BWT_std']:.6f}")
    return "\n".join(lines) + "\n"


def run_ablation(suite: TaskSuite, orders, seed: int = 0, config: BenchConfig | None = None,
                 n_jobs: int = 1) -> dict[str, list[RunReport]]:
    """The five-row component ablation, one run per (row, order)."""
    spec = [((r, j), "mingle", o, seed, ov)
            for r, ov in ABLATION_ROWS.items() for j, o in enumerate(orders)]
    results = run_sweep(suite, spec, config, n_jobs)
    out: dict[str, list[RunReport]] = {r: [] for r in ABLATION_ROWS}
    for (row, _), rep, _ in results:
        out[row].append(rep)
    return out


def prior_gate_activation(suite: TaskSuite, gamma: float, seed: int = 0, order=None,
                          config: BenchConfig | None = None) -> float:
    """Mean ``|g_t(x)|`` of each gate on inputs of tasks merged before ``t``.

    Averaged over layers, over prior tasks, and over gates ``t >= 2``.
    """
    report, ctx = run_continual(suite, "mingle", config, order, seed, return_context=True,
                                gamma=gamma, constraint="relaxed")
    merger = ctx.merger
    vals = []
    for pos in range(1, len(ctx.order)):
        for prev in range(pos):
            task = suite.tasks[ctx.order[prev]]
            gates = merger.gate_activations(task.test_x[ctx.eval_masks[ctx.order[prev]]])
            vals.append(np.mean([np.mean(np.abs(g[:, pos])) for g in gates]))
    return float(np.mean(vals))


def linear_probe_accuracy(task: Task, steps: int = 500, lr: float = 0.5) -> float:
    """Softmax regression on standardised inputs; test accuracy."""
    mu = task.train_x.mean(axis=0)
    sd = task.train_x.std(axis=0) + 1e-12
    x, xt = (task.train_x - mu) / sd, (task.test_x - mu) / sd
    c = int(task.train_y.max()) + 1
    w = np.zeros((x.shape[1], c))
    b = np.zeros(c)
    onehot = np.eye(c)[task.train_y]
    for _ in range(steps):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / x.shape[0]
        w -= lr * x.T @ g
        b -= lr * g.sum(axis=0)
    return float(np.mean(np.argmax(xt @ w + b, axis=1) == task.test_y))


def stat_line(values) -> str:
    v = np.asarray(values, dtype=np.float64)
    return f"{v.mean():.4f} ± {v.std():.4f}" if v.size else "nan"


__all__ = [
    "ABLATION_ROWS", "BenchConfig", "MingleConfig", "RunContext", "RunReport", "Task",
    "TaskSuite", "aggregate", "aggregate_csv", "compute_metrics", "corruption_eval",
    "generate_suite", "linear_probe_accuracy", "order_permutations", "prior_gate_activation",
    "run_ablation", "run_continual", "run_sweep", "seed_indices",
]
