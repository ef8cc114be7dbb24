import json

import numpy as np
import pytest

from mingle.bench import (
    BenchConfig,
    RunReport,
    TaskSuite,
    aggregate,
    aggregate_csv,
    compute_metrics,
    corruption_eval,
    finetuned_models,
    generate_suite,
    linear_probe_accuracy,
    order_permutations,
    run_continual,
    run_sweep,
    seed_indices,
)
from mingle.estimators import SWAMerger
from mingle.model import accuracy, LabeledBatch

FAST = BenchConfig(finetune_steps=60)


def test_suite_deterministic_and_serialisable():
    a, b = generate_suite(n_tasks=2, seed=11), generate_suite(n_tasks=2, seed=11)
    assert a.checksum() == b.checksum()
    assert generate_suite(n_tasks=2, seed=12).checksum() != a.checksum()
    back = TaskSuite.from_dict(json.loads(json.dumps(a.to_dict())))
    assert back.checksum() == a.checksum()


def test_class_blocks_disjoint():
    s = generate_suite(n_tasks=2, classes_per_task=3, seed=0)
    assert s.n_classes == 6
    blocks = [set(t.classes.tolist()) for t in s.tasks]
    assert blocks[0].isdisjoint(blocks[1]) and blocks[0] | blocks[1] == set(range(6))


def test_counts_validated():
    for kw in ({"n_tasks": 0}, {"classes_per_task": 0}, {"samples_per_class": -1}):
        with pytest.raises(ValueError):
            generate_suite(**kw)


def test_large_margin_linear_probe():
    s = generate_suite(n_tasks=3, margin=3.0, seed=5)
    assert all(linear_probe_accuracy(t) >= 0.99 for t in s.tasks)


def test_compute_metrics_examples(rng):
    assert compute_metrics([[0.9, None], [0.9, 0.9]]) == (0.9, 0.0)
    acc, bwt = compute_metrics([[0.9, None], [0.8, 0.9]])
    assert acc == pytest.approx(0.85) and bwt == pytest.approx(-0.1)
    assert compute_metrics([[0.7]]) == (0.7, 0.0)
    with pytest.raises(ValueError):
        compute_metrics([[0.9, None], [None, 0.9]])
    m = np.tril(rng.uniform(size=(5, 5)))
    rows = [[m[i][j] if j <= i else None for j in range(5)] for i in range(5)]
    last = rows[-1]
    acc_oracle = sum(last) / 5
    bwt_oracle = sum(last[i] - rows[i][i] for i in range(4)) / 4
    acc, bwt = compute_metrics(rows)
    assert acc == pytest.approx(acc_oracle, abs=1e-15) and bwt == pytest.approx(bwt_oracle, abs=1e-15)


def test_orders_are_seeded_permutations():
    orders = order_permutations(4, 10)
    assert len({tuple(o) for o in orders}) > 1
    assert all(sorted(o) == [0, 1, 2, 3] for o in orders)
    assert orders == order_permutations(4, 10)
    assert orders[0] == np.random.default_rng(42).permutation(4).tolist()


def test_single_task_equals_finetuned_accuracy(tiny_suite):
    suite = TaskSuite(tiny_suite.tasks[:1], dict(tiny_suite.params, n_tasks=1))
    for method in ("swa", "opcm"):
        rep = run_continual(suite, method, FAST)
        base, head, models = finetuned_models(suite, FAST, 0)
        task = suite.tasks[0]
        mask = np.ones(task.test_y.size, bool)
        mask[seed_indices(suite, 0, 5)[0]] = False
        ref = accuracy(models[0], head.subset(task.classes),
                       LabeledBatch(task.test_x[mask], task.test_y[mask]))
        assert rep.acc == pytest.approx(ref) and rep.bwt == 0.0


def test_swa_identical_models_no_forgetting(tiny_suite, rng):
    base, head, models = finetuned_models(tiny_suite, FAST, 0)
    m = SWAMerger(base, head)
    x = tiny_suite.tasks[0].test_x
    cls = tiny_suite.tasks[0].classes
    m.partial_fit(models[0])
    first = m.predict(x, cls)
    for _ in range(3):
        m.partial_fit(models[0])
    np.testing.assert_array_equal(m.predict(x, cls), first)
    np.testing.assert_allclose(m.merged_.flat(), models[0].flat(), atol=1e-12)


@pytest.mark.parametrize("method", ["ta", "mingle"])
def test_reports_recomputable(tiny_suite, method):
    rep = run_continual(tiny_suite, method, FAST, order=[1, 0])
    assert (rep.acc, rep.bwt) == compute_metrics(rep.matrix)
    assert rep.matrix[0][1] is None
    assert all(0 <= v <= 1 for row in rep.matrix for v in row if v is not None)
    doc = json.loads(rep.to_json())
    assert "wall_time" not in doc
    assert RunReport.from_dict(doc).matrix == rep.matrix


def test_run_validation(tiny_suite):
    with pytest.raises(ValueError):
        run_continual(tiny_suite, "swa", FAST, order=[0, 0])
    with pytest.raises(ValueError):
        run_continual(tiny_suite, "adamerging", FAST)


def test_seed_samples_excluded_and_stable(tiny_suite):
    idx = seed_indices(tiny_suite, 0, 5)
    assert [len(i) for i in idx] == [15, 15]
    for task, i in zip(tiny_suite.tasks, idx):
        assert np.bincount(task.test_y[i]).tolist() == [5, 5, 5]
        assert len(set(i.tolist())) == 15
    assert all(np.array_equal(a, b) for a, b in zip(idx, seed_indices(tiny_suite, 0, 5)))
    _, ctx = run_continual(tiny_suite, "swa", FAST, return_context=True)
    for mask, i in zip(ctx.eval_masks, idx):
        assert not mask[i].any() and mask.sum() == mask.size - 15


def test_corruption_eval(tiny_suite):
    rep, ctx = run_continual(tiny_suite, "ta", FAST, return_context=True)
    clean = corruption_eval(ctx, 0.0)
    assert clean.matrix == rep.matrix and clean.acc == rep.acc
    a, b = corruption_eval(ctx, 50.0, seed=1), corruption_eval(ctx, 50.0, seed=1)
    assert a.matrix == b.matrix
    noisy = corruption_eval(ctx, 1e9, seed=2)
    assert abs(noisy.acc - 1 / 3) < 0.06
    with pytest.raises(ValueError):
        corruption_eval(ctx, -1.0)


def test_sweep_independent_of_jobs(tiny_suite):
    orders = order_permutations(2, 2)
    spec = [((m, j), m, o, 0, {}) for m in ("ta", "mingle") for j, o in enumerate(orders)]
    serial = run_sweep(tiny_suite, spec, FAST, n_jobs=1)
    parallel = run_sweep(tiny_suite, spec, FAST, n_jobs=2)
    assert [r.to_json() for _, r, _ in serial] == [r.to_json() for _, r, _ in parallel]


def test_aggregate_csv():
    reps = [RunReport("ta", [0, 1], 0, [[1.0, None], [0.5, 0.5]], 0.5, -0.5),
            RunReport("ta", [1, 0], 0, [[1.0, None], [0.7, 0.9]], 0.8, -0.3)]
    agg = aggregate(reps)
    assert agg["ACC_mean"] == pytest.approx(0.65) and agg["BWT_std"] == pytest.approx(0.1)
    text = aggregate_csv([("ta", 2, agg)])
    assert text.splitlines()[0] == "method,T,ACC_mean,ACC_std,BWT_mean,BWT_std"
    assert text.splitlines()[1].startswith("ta,2,0.650000,")
