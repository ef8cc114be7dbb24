import itertools

import numpy as np
import pytest

from mingle.theory import (
    DiscreteTaskWorld,
    RiskSpec,
    best_expert_disagreement,
    cross_entropy_risk_matrix,
    cross_entropy_static_risk,
    heterogeneous_world,
    ideal_risk,
    moe_risk_closed_form,
    moe_risk_enumerated,
    moe_risk_monte_carlo,
    random_world,
    simplex_grid,
    static_optimal_risk,
    superiority_condition,
)

EXAMPLE = RiskSpec([0.5, 0.5], [[0.1, 0.9], [0.8, 0.2]], [0.1, 0.1])


def test_closed_form_example():
    assert moe_risk_closed_form(EXAMPLE) == pytest.approx(0.22, abs=1e-15)
    zero = RiskSpec(EXAMPLE.priors, EXAMPLE.risk_matrix, [0.0, 0.0])
    assert moe_risk_closed_form(zero) == ideal_risk(zero) == pytest.approx(0.15)
    one = RiskSpec(EXAMPLE.priors, EXAMPLE.risk_matrix, [1.0, 1.0])
    assert moe_risk_closed_form(one) == pytest.approx(0.5 * 0.9 + 0.5 * 0.8)


def test_spec_validation():
    with pytest.raises(ValueError):
        RiskSpec([0.6, 0.5], [[0, 0], [0, 0]], [0, 0])
    with pytest.raises(ValueError):
        RiskSpec([0.5, 0.5], [[0, 1.5], [0, 0]], [0, 0])
    with pytest.raises(ValueError):
        RiskSpec([0.5, 0.5], [[0, 1], [0, 0]], [0, 2])
    with pytest.raises(ValueError):
        moe_risk_closed_form(RiskSpec([1.0], [[0.2]], [0.0]))


def test_monte_carlo_cross_check():
    est, se = moe_risk_monte_carlo(EXAMPLE, 1_000_000, rng_seed=7)
    assert abs(est - 0.22) < 4 * se
    assert moe_risk_monte_carlo(EXAMPLE, 50_000, rng_seed=7) == moe_risk_monte_carlo(
        EXAMPLE, 50_000, rng_seed=7)
    serial = moe_risk_monte_carlo(EXAMPLE, 300_000, rng_seed=3, chunk_size=50_000)
    parallel = moe_risk_monte_carlo(EXAMPLE, 300_000, rng_seed=3, chunk_size=50_000, n_jobs=4)
    assert serial == parallel
    with pytest.raises(ValueError):
        moe_risk_monte_carlo(EXAMPLE, 0)


def test_monte_carlo_perfect_routing_is_exact():
    spec = RiskSpec([0.3, 0.7], [[0.25, 1.0], [0.5, 0.75]], [0.0, 0.0])
    est, _ = moe_risk_monte_carlo(spec, 10_000)
    # only the R_t(t) values are ever accrued; the mean of a two-valued sample
    assert est in {0.25 * a / 10_000 + 0.75 * (10_000 - a) / 10_000 for a in range(10_001)}
    assert abs(est - ideal_risk(spec)) < 0.02


def test_enumeration_matches_closed_form(rng):
    for _ in range(30):
        world = random_world(int(rng.integers(2, 4)), rng)
        eps = rng.uniform(0, 1, world.n_tasks)
        spec = world.risk_spec(eps)
        assert abs(moe_risk_enumerated(world, eps) - moe_risk_closed_form(spec)) < 1e-12


def test_risk_affine_and_monotone_in_eps(rng):
    world = random_world(3, rng)
    r = world.risk_matrix()
    eps = rng.uniform(0, 0.5, 3)
    for t in range(3):
        vals = []
        for e in (0.0, 0.25, 0.5):
            eps2 = eps.copy()
            eps2[t] = e
            vals.append(moe_risk_closed_form(world.risk_spec(eps2)))
        assert abs((vals[2] - vals[1]) - (vals[1] - vals[0])) < 1e-14
        wrong = (r[t].sum() - r[t, t]) / 2
        if wrong >= r[t, t]:
            assert vals[0] <= vals[1] <= vals[2]


def _one_hot_world(table, labels, priors):
    outs = [np.eye(3)[np.array(t)] for t in table]
    return DiscreteTaskWorld(priors, labels, outs)


def test_static_optimum_examples(rng):
    # identical experts: every grid point has the same risk
    out = rng.dirichlet(np.ones(3), size=4)
    world = DiscreteTaskWorld([0.5, 0.5], [[0, 1, 2, 0], [1, 1, 0, 2]],
                              [np.stack([out, out]), np.stack([out, out])])
    risks = {world.static_risk(a) for a in simplex_grid(2, 11)}
    assert len(risks) == 1
    # expert 0 perfect on both tasks
    labels = [[0, 1, 2], [2, 1, 0]]
    table = [[[0, 1, 2], [1, 2, 0]], [[2, 1, 0], [0, 0, 0]]]
    risk, alpha = static_optimal_risk(_one_hot_world(table, labels, [0.5, 0.5]), 101)
    assert risk == 0.0
    np.testing.assert_allclose(alpha, [1.0, 0.0])


def test_static_optimum_double_evaluation(rng):
    world = random_world(2, rng)
    risk, alpha = static_optimal_risk(world, 101)
    brute = []
    for a in simplex_grid(2, 101):
        tot = 0.0
        for t in range(2):
            for x, y in enumerate(world.labels[t]):
                mix = [sum(a[i] * world.outputs[t][i][x][c] for i in range(2)) for c in range(3)]
                tot += world.priors[t] * world.weights[t][x] * (int(np.argmax(mix)) != y)
        brute.append(tot)
    assert abs(min(brute) - risk) < 1e-12
    assert abs(world.static_risk(alpha) - risk) < 1e-12


def test_grid_and_task_limit(rng):
    g = simplex_grid(3, 5)
    assert len(g) == 15
    np.testing.assert_allclose(g.sum(axis=1), 1.0)
    assert {tuple(r) for r in g} == {tuple(np.array(c) / 4) for c in
                                     itertools.product(range(5), repeat=3) if sum(c) == 4}
    with pytest.raises(ValueError, match="at most"):
        static_optimal_risk(random_world(4, rng), 5)
    with pytest.raises(ValueError):
        simplex_grid(2, 1)


def test_superiority_boundary_and_item_one():
    spec = RiskSpec([0.5, 0.5], [[0.0, 1.0], [1.0, 0.0]], [0.5, 0.5])
    assert not superiority_condition(spec, 0.5)
    spec0 = RiskSpec([0.5, 0.5], [[0.0, 1.0], [1.0, 0.0]], [0.0, 0.0])
    assert superiority_condition(spec0, 0.5)


def test_superiority_agrees_with_direct_comparison(rng):
    for _ in range(1000):
        t = int(rng.integers(2, 5))
        r = rng.uniform(size=(t, t))
        spec = RiskSpec(rng.dirichlet(np.ones(t)), r, rng.uniform(size=t))
        static = rng.uniform(0, 1)
        flag = superiority_condition(spec, static)
        direct = moe_risk_closed_form(spec) < static
        gap_ok = abs(moe_risk_closed_form(spec) - static) > 1e-12
        if gap_ok:
            assert flag == direct


def test_heterogeneous_worlds_strict(rng):
    for t in (2, 3):
        for _ in range(10):
            world = heterogeneous_world(t, rng)
            assert best_expert_disagreement(world)
            static, _ = static_optimal_risk(world, 31)
            assert moe_risk_enumerated(world, np.zeros(t)) < static


def test_cross_entropy_jensen_two_point():
    # one task, two inputs, two experts, label 0 everywhere
    outs = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.3, 0.7], [0.6, 0.4]]])
    world = DiscreteTaskWorld([0.5, 0.5], [[0, 0], [0, 0]], [outs, outs])
    for a in (0.0, 0.3, 0.5, 1.0):
        alpha = np.array([a, 1 - a])
        mix = -0.5 * (np.log(0.9 * a + 0.3 * (1 - a)) + np.log(0.2 * a + 0.6 * (1 - a)))
        assert cross_entropy_static_risk(world, alpha) == pytest.approx(mix, rel=1e-12)
        ce = cross_entropy_risk_matrix(world)
        bound = alpha @ (np.array([0.5, 0.5]) @ ce)
        assert cross_entropy_static_risk(world, alpha) <= bound + 1e-12
