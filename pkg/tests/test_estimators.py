import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mingle.bench import BenchConfig, finetuned_models
from mingle.estimators import (
    MagMaxMerger,
    MingleMerger,
    OPCMMerger,
    PrototypeClassifier,
    SWAMerger,
    TaskArithmeticMerger,
    TiesMerger,
)
from mingle.model import init_model, random_head

FAST = BenchConfig(finetune_steps=60)


@pytest.fixture(scope="module")
def parts(tiny_suite):
    return finetuned_models(tiny_suite, FAST, 0)


ALL = [SWAMerger, TaskArithmeticMerger, TiesMerger, MagMaxMerger, OPCMMerger, MingleMerger]


@pytest.mark.parametrize("cls", ALL)
def test_clone_and_params(cls, parts):
    base, head, _ = parts
    est = cls(base, head)
    params = est.get_params()
    assert params["base"] is base and params["head"] is head
    c = clone(est)
    assert type(c) is cls and c.get_params().keys() == params.keys()
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, base.d_in)))


@pytest.mark.parametrize("cls", ALL)
def test_fit_equals_partial_fit(cls, parts, tiny_suite):
    base, head, models = parts
    X = [t.test_x[:15] for t in tiny_suite.tasks]
    classes = [t.classes for t in tiny_suite.tasks]
    a = cls(base, head).fit(models, X, classes)
    b = cls(base, head)
    for m, x, c in zip(models, X, classes):
        b.partial_fit(m, x, c)
    xt = tiny_suite.tasks[1].test_x
    np.testing.assert_array_equal(a.decision_function(xt), b.decision_function(xt))
    pred = a.predict(xt, classes[1])
    assert set(pred.tolist()) <= set(classes[1].tolist())
    proba = a.predict_proba(xt, classes[1])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert 0 <= a.score(xt, tiny_suite.tasks[1].classes[tiny_suite.tasks[1].test_y], classes[1]) <= 1


def test_partial_fit_validation(parts):
    base, head, models = parts
    with pytest.raises(TypeError):
        SWAMerger(base, head).partial_fit("model")
    with pytest.raises(ValueError):
        SWAMerger(base, head).partial_fit(init_model([3, 4], np.random.default_rng(0)))
    with pytest.raises(ValueError):
        MingleMerger(base, head).partial_fit(models[0], None, [0, 1, 2])
    with pytest.raises(ValueError):
        MingleMerger(base, head, constraint="soft").partial_fit(models[0], np.ones((2, 16)))
    with pytest.raises(ValueError):
        TaskArithmeticMerger(base, head, scale=0.0).partial_fit(models[0])
    with pytest.raises(ValueError):
        SWAMerger(base, head).partial_fit(models[0]).predict(np.ones((1, 16)), classes=[99])


def test_no_tta_is_fixed_unit_gates(parts, tiny_suite):
    base, head, models = parts
    m = MingleMerger(base, head, tta=False).partial_fit(models[0])
    gates = m.gate_activations(tiny_suite.tasks[0].test_x[:4])
    for g in gates:
        np.testing.assert_array_equal(g, 1.0)


def test_mingle_trace_and_gates(parts, tiny_suite):
    base, head, models = parts
    m = MingleMerger(base, head, steps=5)
    m.partial_fit(models[0], tiny_suite.tasks[0].test_x[:15], tiny_suite.tasks[0].classes)
    trace = []
    m.partial_fit(models[1], tiny_suite.tasks[1].test_x[:15], tiny_suite.tasks[1].classes,
                  trace=trace)
    assert len(trace) == 5 * base.n_layers
    assert m.bank_.n_columns(0) == 6
    assert [g.shape for g in m.gate_activations(tiny_suite.tasks[0].test_x[:4])] == [(4, 2)] * 3


def test_prototype_classifier(rng):
    x = np.vstack([rng.normal(-1, 0.2, (30, 3)), rng.normal(1, 0.2, (30, 3))])
    y = np.repeat([4, 7], 30)
    head = random_head(8, 5, rng)
    clf = PrototypeClassifier(init_model([3, 6, 5], rng), head, steps=150, lr=0.1).fit(x, y)
    assert clf.classes_.tolist() == [4, 7]
    assert clf.score(x, y, classes=[4, 7]) > 0.95
    with pytest.raises(ValueError):
        PrototypeClassifier(init_model([3, 5], rng), head).fit(x, y, classes=[4])
