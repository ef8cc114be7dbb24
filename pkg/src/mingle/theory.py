"""Risk of hard-routed mixtures of experts versus static expert averaging.

Two routes are kept apart on purpose: :func:`moe_risk_closed_form` works
from the risk matrix alone, while :func:`moe_risk_enumerated` walks every
input of a :class:`DiscreteTaskWorld` and applies the routing-noise model
point by point.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np


@dataclass
class RiskSpec:
    """Task priors, ``risk_matrix[t, i]`` = risk of expert ``i`` on task ``t``, routing errors."""

    priors: np.ndarray
    risk_matrix: np.ndarray
    routing_errors: np.ndarray

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=np.float64)
        self.risk_matrix = np.asarray(self.risk_matrix, dtype=np.float64)
        self.routing_errors = np.asarray(self.routing_errors, dtype=np.float64)
        t = self.priors.shape[0]
        if self.risk_matrix.shape != (t, t) or self.routing_errors.shape != (t,):
            raise ValueError("priors, risk_matrix and routing_errors disagree on T")
        if np.any(self.priors < 0) or abs(self.priors.sum() - 1.0) > 1e-12:
            raise ValueError("priors must be non-negative and sum to 1")
        if np.any((self.risk_matrix < 0) | (self.risk_matrix > 1)):
            raise ValueError("risks must lie in [0, 1]")
        if np.any((self.routing_errors < 0) | (self.routing_errors > 1)):
            raise ValueError("routing errors must lie in [0, 1]")

    @property
    def n_tasks(self) -> int:
        return self.priors.shape[0]

    @classmethod
    def from_dict(cls, doc: dict) -> RiskSpec:
        return cls(doc["priors"], doc["risk_matrix"], doc["routing_errors"])

    @classmethod
    def from_json(cls, path) -> RiskSpec:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def ideal_risk(spec: RiskSpec) -> float:
    return float(spec.priors @ np.diag(spec.risk_matrix))


def wrong_risk(spec: RiskSpec) -> np.ndarray:
    """Mean risk of the ``T - 1`` wrong experts on each task."""
    t = spec.n_tasks
    if t < 2:
        raise ValueError("wrong-expert risk needs at least two tasks")
    r = spec.risk_matrix
    return (r.sum(axis=1) - np.diag(r)) / (t - 1)


def routing_penalty(spec: RiskSpec) -> float:
    """``sum_t P(t) eps_t (R_wrong,t - R_t(t))``."""
    return float(np.sum(spec.priors * spec.routing_errors
                        * (wrong_risk(spec) - np.diag(spec.risk_matrix))))


def moe_risk_closed_form(spec: RiskSpec) -> float:
    return ideal_risk(spec) + routing_penalty(spec)


def _mc_chunk(spec: RiskSpec, rng_seed: int, index: int, size: int) -> tuple[float, float]:
    # counter-based stream: chunk i always sees the same draws
    rng = np.random.Generator(np.random.Philox(key=rng_seed).jumped(index))
    t_count = spec.n_tasks
    tasks = np.searchsorted(np.cumsum(spec.priors), rng.random(size), side="right")
    tasks = np.minimum(tasks, t_count - 1)
    wrong = rng.random(size) < spec.routing_errors[tasks]
    offset = rng.integers(1, t_count, size=size)
    chosen = np.where(wrong, (tasks + offset) % t_count, tasks)
    loss = spec.risk_matrix[tasks, chosen]
    return float(loss.sum()), float((loss * loss).sum())


def moe_risk_monte_carlo(
    spec: RiskSpec,
    n_draws: int,
    rng_seed: int = 0,
    chunk_size: int = 1 << 16,
    n_jobs: int = 1,
) -> tuple[float, float]:
    """Simulate hard routing with noise; returns ``(estimate, standard error)``.

    Draws are split into fixed-size chunks, each with its own jumped Philox
    stream, so the estimate does not depend on ``n_jobs``.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    if spec.n_tasks < 2:
        raise ValueError("routing simulation needs at least two tasks")
    sizes = [chunk_size] * (n_draws // chunk_size)
    if n_draws % chunk_size:
        sizes.append(n_draws % chunk_size)
    jobs = [(spec, rng_seed, i, s) for i, s in enumerate(sizes)]
    if n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(lambda a: _mc_chunk(*a), jobs))
    else:
        parts = [_mc_chunk(*a) for a in jobs]
    total = sum(p[0] for p in parts)
    total_sq = sum(p[1] for p in parts)
    mean = total / n_draws
    var = max(total_sq / n_draws - mean * mean, 0.0)
    return mean, float(np.sqrt(var / n_draws))


@dataclass
class DiscreteTaskWorld:
    """Finite task domains with expert probability tables.

    ``outputs[t][i]`` is an ``n_t x C`` array: expert ``i``'s class
    distribution on each input of task ``t``. ``weights[t]`` is the input
    distribution of task ``t`` (uniform when omitted).
    """

    priors: np.ndarray
    labels: list[np.ndarray]
    outputs: list[np.ndarray]
    weights: list[np.ndarray] | None = None

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=np.float64)
        t = self.priors.shape[0]
        self.labels = [np.asarray(l, dtype=np.int64) for l in self.labels]
        self.outputs = [np.asarray(o, dtype=np.float64) for o in self.outputs]
        if len(self.labels) != t or len(self.outputs) != t:
            raise ValueError("one label table and one output table per task required")
        for k, (lab, out) in enumerate(zip(self.labels, self.outputs)):
            if out.ndim != 3 or out.shape[0] != t or out.shape[1] != lab.shape[0]:
                raise ValueError(f"task {k}: outputs must be (T, n_points, C)")
        if self.weights is None:
            self.weights = [np.full(l.shape[0], 1.0 / l.shape[0]) for l in self.labels]
        else:
            self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        if abs(self.priors.sum() - 1.0) > 1e-12:
            raise ValueError("priors must sum to 1")

    @property
    def n_tasks(self) -> int:
        return self.priors.shape[0]

    def zero_one(self, t: int, i: int) -> np.ndarray:
        """Per-input 0-1 loss of expert ``i`` on task ``t`` (ties -> lowest class)."""
        return (np.argmax(self.outputs[t][i], axis=1) != self.labels[t]).astype(np.float64)

    def risk_matrix(self) -> np.ndarray:
        t = self.n_tasks
        return np.array([[self.weights[s] @ self.zero_one(s, i) for i in range(t)]
                         for s in range(t)])

    def risk_spec(self, routing_errors) -> RiskSpec:
        return RiskSpec(self.priors, self.risk_matrix(), routing_errors)

    def static_risk(self, alpha) -> float:
        alpha = np.asarray(alpha, dtype=np.float64)
        total = 0.0
        for t in range(self.n_tasks):
            mix = np.tensordot(alpha, self.outputs[t], axes=1)
            wrong = np.argmax(mix, axis=1) != self.labels[t]
            total += self.priors[t] * float(self.weights[t] @ wrong)
        return total


def moe_risk_enumerated(world: DiscreteTaskWorld, routing_errors) -> float:
    """Exact risk of the noisy hard router by enumerating inputs and routes."""
    eps = np.asarray(routing_errors, dtype=np.float64)
    t_count = world.n_tasks
    total = 0.0
    for t in range(t_count):
        for x in range(world.labels[t].shape[0]):
            y = world.labels[t][x]
            expected = 0.0
            for i in range(t_count):
                p_route = 1.0 - eps[t] if i == t else eps[t] / (t_count - 1)
                pred = int(np.argmax(world.outputs[t][i][x]))
                expected += p_route * (pred != y)
            total += world.priors[t] * world.weights[t][x] * expected
    return total


def simplex_grid(n_tasks: int, resolution: int) -> np.ndarray:
    """All weight vectors with entries in ``{0, 1/(res-1), ..., 1}`` summing to 1."""
    steps = resolution - 1
    if steps < 1:
        raise ValueError("grid resolution must be >= 2")
    pts = [c + (steps - sum(c),) for c in itertools.product(range(steps + 1), repeat=n_tasks - 1)
           if sum(c) <= steps]
    return np.array(pts, dtype=np.float64) / steps


def static_optimal_risk(world: DiscreteTaskWorld, grid_resolution: int = 101,
                        max_tasks: int = 3) -> tuple[float, np.ndarray]:
    """Best static mixture over a simplex grid under 0-1 loss.

    Ties between grid points go to the one with the largest single weight.
    """
    if world.n_tasks > max_tasks:
        raise ValueError(
            f"grid search over {world.n_tasks} tasks is too large; "
            f"use at most {max_tasks} tasks or a coarser problem"
        )
    grid = simplex_grid(world.n_tasks, grid_resolution)
    risks = np.zeros(grid.shape[0])
    for t in range(world.n_tasks):
        mix = np.einsum("gi,inc->gnc", grid, world.outputs[t])
        wrong = np.argmax(mix, axis=2) != world.labels[t][None, :]
        risks += world.priors[t] * (wrong @ world.weights[t])
    # among tied minimisers prefer the most concentrated weights
    tied = np.flatnonzero(risks <= risks.min())
    best = int(tied[np.argmax(grid[tied].max(axis=1))])
    return float(risks[best]), grid[best]


def superiority_condition(spec: RiskSpec, static_opt: float) -> bool:
    """Whether routing noise stays below the static-vs-ideal gap.

    When it does, the closed-form MoE risk is strictly below ``static_opt``.
    """
    gap = static_opt - ideal_risk(spec)
    holds = routing_penalty(spec) < gap
    if holds and not moe_risk_closed_form(spec) < static_opt:
        raise AssertionError("superiority condition holds but MoE risk is not below static")
    return bool(holds)


def random_world(n_tasks: int, rng, n_points: int = 12, n_classes: int = 3,
                 concentration: float = 0.5) -> DiscreteTaskWorld:
    """World with Dirichlet-distributed expert outputs; expert ``t`` leans towards task ``t``'s labels."""
    priors = rng.dirichlet(np.ones(n_tasks))
    labels, outputs = [], []
    for t in range(n_tasks):
        y = rng.integers(0, n_classes, n_points)
        out = rng.dirichlet(np.full(n_classes, concentration), size=(n_tasks, n_points))
        out[t, np.arange(n_points), y] += rng.uniform(0.0, 1.0, n_points)
        out[t] /= out[t].sum(axis=1, keepdims=True)
        labels.append(y)
        outputs.append(out)
    return DiscreteTaskWorld(priors, labels, outputs)


def heterogeneous_world(n_tasks: int, rng, n_points: int = 12, n_classes: int = 3) -> DiscreteTaskWorld:
    """World where every task's own expert is strictly best on that task.

    Expert ``t`` is correct on a non-empty random subset of task ``t``'s
    inputs; on every task-``t`` input all other experts vote for one shared
    wrong class. A fixed weight vector can give majority weight to at most
    one expert, so no static mixture matches ideal routing.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    priors = rng.dirichlet(np.ones(n_tasks))
    labels, outputs = [], []
    for t in range(n_tasks):
        y = rng.integers(0, n_classes, n_points)
        decoy = (y + rng.integers(1, n_classes, n_points)) % n_classes
        correct = rng.random(n_points) < rng.uniform(0.6, 1.0)
        # one pinned input the own expert gets right with label above the
        # decoy, so even an exact weight tie (which breaks to the lower
        # class) misclassifies it
        pin = rng.integers(n_points)
        correct[pin] = True
        y[pin], decoy[pin] = n_classes - 1, 0
        out = np.zeros((n_tasks, n_points, n_classes))
        own = np.where(correct, y, decoy)
        out[t, np.arange(n_points), own] = 1.0
        for i in range(n_tasks):
            if i != t:
                out[i, np.arange(n_points), decoy] = 1.0
        labels.append(y)
        outputs.append(out)
    return DiscreteTaskWorld(priors, labels, outputs)


def best_expert_disagreement(world: DiscreteTaskWorld) -> bool:
    """True when at least two tasks have different best experts."""
    best = np.argmin(world.risk_matrix(), axis=1)
    return len(set(best.tolist())) > 1


def cross_entropy_static_risk(world: DiscreteTaskWorld, alpha) -> float:
    """Cross-entropy risk of the static mixture (the convex-loss case)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    total = 0.0
    for t in range(world.n_tasks):
        mix = np.tensordot(alpha, world.outputs[t], axes=1)
        p = mix[np.arange(mix.shape[0]), world.labels[t]]
        total += world.priors[t] * float(world.weights[t] @ -np.log(p))
    return total


def cross_entropy_risk_matrix(world: DiscreteTaskWorld) -> np.ndarray:
    t_count = world.n_tasks
    out = np.zeros((t_count, t_count))
    for t in range(t_count):
        for i in range(t_count):
            p = world.outputs[t][i][np.arange(world.labels[t].shape[0]), world.labels[t]]
            out[t, i] = float(world.weights[t] @ -np.log(p))
    return out
