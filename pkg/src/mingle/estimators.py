"""scikit-learn style wrappers.

Mergers follow an incremental-learning contract: ``partial_fit`` ingests one
fine-tuned task model (plus, for MINGLE, unlabeled seed inputs of that task)
and ``predict``/``decision_function`` evaluate the current merged model.
``classes`` restricts the head to a task's class block, mirroring
task-specific class embeddings at evaluation time.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from mingle import mergers
from mingle.engine import (
    MergedModel,
    SeedBuffer,
    adapt_task,
    build_expert,
    merged_forward,
    update_bank,
)
from mingle.model import (
    LabeledBatch,
    ModelParams,
    PrototypeHead,
    finetune,
    forward,
    softmax,
)
from mingle.nullspace import SubspaceBank


def _class_ids(head: PrototypeHead, classes):
    if classes is None:
        return np.arange(head.n_classes)
    classes = np.asarray(classes, dtype=np.int64)
    if classes.ndim != 1 or classes.size == 0:
        raise ValueError("classes must be a non-empty 1-d sequence")
    if classes.min() < 0 or classes.max() >= head.n_classes:
        raise ValueError("classes outside the head's range")
    return classes


class _HeadClassifierMixin(ClassifierMixin):
    """Shared prediction surface for anything that produces cosine logits."""

    def _logits(self, X, classes):
        raise NotImplementedError

    def decision_function(self, X, classes=None):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return self._logits(X, classes)

    def predict_proba(self, X, classes=None):
        return softmax(self.decision_function(X, classes))

    def predict(self, X, classes=None):
        ids = _class_ids(self.head, classes)
        return ids[np.argmax(self.decision_function(X, classes), axis=1)]

    def score(self, X, y, classes=None, sample_weight=None):
        return float(np.average(self.predict(X, classes) == np.asarray(y), weights=sample_weight))


class PrototypeClassifier(_HeadClassifierMixin, BaseEstimator):
    """Fine-tunes a copy of ``init`` on ``(X, y)`` with the head frozen.

    Labels are global class ids; ``classes`` restricts the head during
    training (defaults to the labels present in ``y``).
    """

    def __init__(self, init=None, head=None, steps=200, lr=0.05, batch_size=None,
                 random_state=0):
        self.init = init
        self.head = head
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y, classes=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        ids = _class_ids(self.head, np.unique(y) if classes is None else classes)
        lookup = {c: j for j, c in enumerate(ids)}
        try:
            local = np.array([lookup[c] for c in y])
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} not in classes") from None
        self.classes_ = ids
        self.model_ = finetune(self.init, self.head.subset(ids), LabeledBatch(X, local),
                               self.steps, self.lr, self.random_state, self.batch_size)
        return self

    def _logits(self, X, classes):
        ids = _class_ids(self.head, classes)
        return forward(self.model_, self.head.subset(ids), X)[0]


class _StaticMerger(_HeadClassifierMixin, BaseEstimator):
    def __init__(self, base=None, head=None):
        self.base = base
        self.head = head

    def _check_model(self, model):
        if not isinstance(model, ModelParams):
            raise TypeError("partial_fit expects a ModelParams task model")
        if model.shapes() != self.base.shapes():
            raise ValueError("task model shapes do not match the base model")

    def partial_fit(self, model, X=None, classes=None):
        self._check_model(model)
        if not hasattr(self, "n_tasks_"):
            self.n_tasks_ = 0
            self.merged_ = None
        self.n_tasks_ += 1
        self.merged_ = self._merge(model, self.n_tasks_)
        return self

    def fit(self, models, X=None, classes=None):
        for attr in ("n_tasks_", "merged_", "acc_delta_"):
            self.__dict__.pop(attr, None)
        for i, m in enumerate(models):
            self.partial_fit(m, None if X is None else X[i],
                             None if classes is None else classes[i])
        return self

    def _merge(self, model, t):
        raise NotImplementedError

    def _logits(self, X, classes):
        ids = _class_ids(self.head, classes)
        return forward(self.merged_, self.head.subset(ids), X)[0]


class SWAMerger(_StaticMerger):
    def _merge(self, model, t):
        return mergers.merge_swa(self.merged_, model, t)


class TaskArithmeticMerger(_StaticMerger):
    def __init__(self, base=None, head=None, scale=0.3):
        super().__init__(base, head)
        self.scale = scale

    def _merge(self, model, t):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        prev = self.base if self.merged_ is None else self.merged_
        return mergers.merge_ta(prev, mergers.task_vector(model, self.base), self.scale)


class TiesMerger(_StaticMerger):
    def __init__(self, base=None, head=None, scale=1.0, trim_fraction=0.2):
        super().__init__(base, head)
        self.scale = scale
        self.trim_fraction = trim_fraction

    def _merge(self, model, t):
        self.acc_delta_ = mergers.merge_ties(getattr(self, "acc_delta_", None),
                                             mergers.task_vector(model, self.base),
                                             self.trim_fraction)
        return mergers.merge_ta(self.base, self.acc_delta_, self.scale)


class MagMaxMerger(_StaticMerger):
    def __init__(self, base=None, head=None, scale=1.0):
        super().__init__(base, head)
        self.scale = scale

    def _merge(self, model, t):
        self.acc_delta_ = mergers.merge_magmax(getattr(self, "acc_delta_", None),
                                               mergers.task_vector(model, self.base))
        return mergers.merge_ta(self.base, self.acc_delta_, self.scale)


class OPCMMerger(_StaticMerger):
    def __init__(self, base=None, head=None, scale_rule="sqrt"):
        super().__init__(base, head)
        self.scale_rule = scale_rule

    def _merge(self, model, t):
        return mergers.merge_opcm(self.base, self.merged_,
                                  mergers.task_vector(model, self.base), t, self.scale_rule)


class MingleMerger(_HeadClassifierMixin, BaseEstimator):
    """Mixture of null-space gated low-rank experts with test-time gate tuning.

    ``partial_fit(model, X, classes)`` builds the task's experts, appends a
    zero-initialised gate per layer, adapts it on the unlabeled seed inputs
    ``X`` against ``model``'s predictions over ``classes``, then records the
    dominant activation directions of ``X`` for later tasks.

    ``constraint`` is ``"relaxed"``, ``"hard"`` or ``"none"``. Setting
    ``tta=False`` gives fixed unit gates (plain sum of low-rank experts);
    ``freeze_old_gates=False`` lets earlier gates keep adapting.
    """

    def __init__(self, base=None, head=None, rank=4, k=3, gamma=1.0, beta=0.99, steps=50,
                 lr=1e-4, batch_size=16, constraint="relaxed", tta=True,
                 freeze_old_gates=True, update_bias=True, enabled_layers=None,
                 random_state=0):
        self.base = base
        self.head = head
        self.rank = rank
        self.k = k
        self.gamma = gamma
        self.beta = beta
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.constraint = constraint
        self.tta = tta
        self.freeze_old_gates = freeze_old_gates
        self.update_bias = update_bias
        self.enabled_layers = enabled_layers
        self.random_state = random_state

    def _validate_params(self):
        if self.constraint not in ("relaxed", "hard", "none"):
            raise ValueError(f"unknown constraint {self.constraint!r}")
        if not (self.gamma > 0 and 0 <= self.beta < 1 and self.k >= 1 and self.rank >= 1):
            raise ValueError("invalid MINGLE hyper-parameters")

    def partial_fit(self, model, X=None, classes=None, trace=None):
        self._validate_params()
        if not hasattr(self, "model_"):
            enabled = None if self.enabled_layers is None else list(self.enabled_layers)
            self.model_ = MergedModel(self.base, self.head, enabled=enabled)
            self.bank_ = SubspaceBank([w.shape[1] for w, _ in self.base.layers], self.k)
        t = self.model_.n_tasks
        delta = mergers.task_vector(model, self.base)
        priors = None if t == 0 else [self.model_.expert_sum_svd(l)
                                      for l in range(self.base.n_layers)]
        experts = build_expert(delta, priors, self.rank, is_first_task=(t == 0))
        if not self.tta:
            self.model_.add_task(experts, gate_bias=1.0, frozen=True)
            return self
        if X is None:
            raise ValueError("seed inputs X are required for test-time adaptation")
        X = check_array(X, dtype=np.float64)
        ids = _class_ids(self.head, classes)
        self.model_.add_task(experts, freeze_previous=self.freeze_old_gates)
        self.model_ = adapt_task(
            self.model_, model, SeedBuffer(X), ids,
            self.bank_ if self.constraint != "none" else None,
            steps=self.steps, lr=self.lr, batch_size=self.batch_size,
            rng_seed=self.random_state * 1000 + t, constraint=self.constraint,
            gamma=self.gamma, beta=self.beta, update_bias=self.update_bias, trace=trace,
        )
        if self.constraint != "none":
            self.bank_ = update_bank(self.model_, self.bank_, X, self.k)
        return self

    def fit(self, models, X=None, classes=None):
        for attr in ("model_", "bank_"):
            self.__dict__.pop(attr, None)
        for i, m in enumerate(models):
            self.partial_fit(m, None if X is None else X[i],
                             None if classes is None else classes[i])
        return self

    def gate_activations(self, X):
        """Per-layer ``N x n_tasks`` gate scalars on ``X``."""
        check_is_fitted(self)
        return merged_forward(self.model_, check_array(X, dtype=np.float64))[2]

    def _logits(self, X, classes):
        ids = _class_ids(self.head, classes)
        return merged_forward(self.model_, X, ids)[0]
