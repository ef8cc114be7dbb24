"""Feed-forward backbone with a frozen cosine-similarity prototype head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mingle.linalg import as_matrix


@dataclass
class ModelParams:
    """Linear layers ``(weight d_out x d_in, bias d_out)`` with relu between them.

    The last layer is linear; its output is the feature vector fed to the head.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        layers = []
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            w = as_matrix(w, f"layer {i} weight")
            b = np.array(b, dtype=np.float64).reshape(-1)
            if b.shape[0] != w.shape[0]:
                raise ValueError(f"layer {i}: bias length {b.shape[0]} != d_out {w.shape[0]}")
            if not np.all(np.isfinite(b)):
                raise ValueError(f"layer {i} bias contains non-finite entries")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ValueError(f"layer {i}: d_in {w.shape[1]} does not chain with {prev_out}")
            prev_out = w.shape[0]
            layers.append((w, b))
        self.layers = layers

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def d_out(self) -> int:
        return self.layers[-1][0].shape[0]

    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w, _ in self.layers]

    def copy(self) -> ModelParams:
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers], self.activation)

    def map(self, fn, *others: ModelParams) -> ModelParams:
        """Apply ``fn`` entry-wise to matching arrays of ``self`` and ``others``."""
        for o in others:
            if o.shapes() != self.shapes():
                raise ValueError(f"shape mismatch: {self.shapes()} vs {o.shapes()}")
        out = []
        for i, (w, b) in enumerate(self.layers):
            ws = [o.layers[i][0] for o in others]
            bs = [o.layers[i][1] for o in others]
            out.append((fn(w, *ws), fn(b, *bs)))
        return ModelParams(out, self.activation)

    def __add__(self, other: ModelParams) -> ModelParams:
        return self.map(np.add, other)

    def __sub__(self, other: ModelParams) -> ModelParams:
        return self.map(np.subtract, other)

    def scale(self, factor: float) -> ModelParams:
        return self.map(lambda a: a * factor)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def to_dict(self, meta: dict | None = None) -> dict:
        return {
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in self.layers],
            "meta": dict(meta or {}),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ModelParams:
        return cls([(np.array(l["w"], dtype=np.float64), np.array(l["b"], dtype=np.float64))
                    for l in doc["layers"]])


def save_checkpoint(model: ModelParams, path, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model.to_dict(meta)))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    return ModelParams.from_dict(doc), doc.get("meta", {})


@dataclass
class PrototypeHead:
    prototypes: np.ndarray
    temperature: float = 20.0

    def __post_init__(self):
        p = as_matrix(self.prototypes, "prototypes")
        norms = np.linalg.norm(p, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            raise ValueError("prototype rows must have unit L2 norm")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        self.prototypes = p

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def subset(self, classes) -> PrototypeHead:
        return PrototypeHead(self.prototypes[np.asarray(classes)], self.temperature)


def random_head(n_classes: int, dim: int, rng, temperature: float = 20.0) -> PrototypeHead:
    p = rng.standard_normal((n_classes, dim))
    return PrototypeHead(p / np.linalg.norm(p, axis=1, keepdims=True), temperature)


def init_model(sizes, rng, weight_scale: float = 1.0) -> ModelParams:
    """He-initialised network with layer widths ``sizes = [d_in, h1, ..., d_out]``."""
    layers = []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((d_out, d_in)) * weight_scale * np.sqrt(2.0 / d_in)
        layers.append((w, np.zeros(d_out)))
    return ModelParams(layers)


@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs, "inputs")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("inputs and labels differ in length")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class ForwardRecord:
    """Per-layer inputs and pre-activations captured during a forward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)

    @property
    def features(self) -> np.ndarray:
        return self.preacts[-1]


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, x / safe, 0.0), norms


def head_logits(features: np.ndarray, head: PrototypeHead) -> np.ndarray:
    unit, _ = normalize_rows(features)
    return head.temperature * unit @ head.prototypes.T


def head_backward(features: np.ndarray, head: PrototypeHead, dlogits: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. features given gradient w.r.t. cosine logits."""
    unit, norms = normalize_rows(features)
    g = head.temperature * dlogits @ head.prototypes
    g = g - np.sum(g * unit, axis=1, keepdims=True) * unit
    return np.where(norms > 0, g / np.where(norms > 0, norms, 1.0), 0.0)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _check_inputs(model: ModelParams, inputs) -> np.ndarray:
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != model.d_in:
        raise ValueError(f"input dimension {x.shape[1]} != model d_in {model.d_in}")
    return x


def forward(model: ModelParams, head: PrototypeHead, inputs) -> tuple[np.ndarray, ForwardRecord]:
    h = _check_inputs(model, inputs)
    if head.prototypes.shape[1] != model.d_out:
        raise ValueError("head dimension does not match model output")
    rec = ForwardRecord()
    for i, (w, b) in enumerate(model.layers):
        rec.inputs.append(h)
        z = h @ w.T + b
        rec.preacts.append(z)
        h = np.maximum(z, 0.0) if i < model.n_layers - 1 else z
    return head_logits(h, head), rec


def cross_entropy_and_grads(model: ModelParams, head: PrototypeHead, data: LabeledBatch):
    """Mean cross-entropy and its exact gradient w.r.t. every weight and bias."""
    if len(data) == 0:
        raise ValueError("empty batch")
    if np.any(data.labels >= head.n_classes):
        raise ValueError("label outside the head's class range")
    logits, rec = forward(model, head, data.inputs)
    n = len(data)
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), data.labels]))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), data.labels] -= 1.0
    dlogits /= n
    dz = head_backward(rec.features, head, dlogits)
    grads = [None] * model.n_layers
    for i in reversed(range(model.n_layers)):
        w, _ = model.layers[i]
        grads[i] = (dz.T @ rec.inputs[i], dz.sum(axis=0))
        if i > 0:
            dz = (dz @ w) * (rec.preacts[i - 1] > 0)
    return loss, ModelParams(grads)


def finetune(
    init: ModelParams,
    head: PrototypeHead,
    data: LabeledBatch,
    steps: int,
    lr: float,
    rng_seed: int,
    batch_size: int | None = None,
    history: list | None = None,
) -> ModelParams:
    """Plain gradient descent on cross-entropy with the head frozen.

    ``batch_size=None`` uses the full batch; otherwise minibatches are drawn
    from a generator seeded with ``rng_seed``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(rng_seed)
    model = init.copy()
    for step in range(steps):
        batch = data
        if batch_size is not None and batch_size < len(data):
            idx = rng.choice(len(data), size=batch_size, replace=False)
            batch = LabeledBatch(data.inputs[idx], data.labels[idx])
        loss, grads = cross_entropy_and_grads(model, head, batch)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at fine-tuning step {step}")
        if history is not None:
            history.append(loss)
        model = model.map(lambda p, g: p - lr * g, grads)
    return model


def accuracy(model: ModelParams, head: PrototypeHead, data: LabeledBatch) -> float:
    logits, _ = forward(model, head, data.inputs)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))
