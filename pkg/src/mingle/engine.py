"""Gated mixture of low-rank experts and its test-time adaptation loop.

Each linear layer of the backbone gets, per merged task, a low-rank expert
``f_i(h) = B_i A_i h + c_i`` and a scalar linear gate ``g_i(h) = w_i . h + b_i``
evaluated on the layer input. The layer output is

    W h + b + sum_i g_i(h) * f_i(h)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mingle.linalg import (
    SvdResult,
    as_matrix,
    project_orthogonal_complement,
    svd,
    svd_of_product,
    truncated_svd,
)
from mingle.model import (
    ForwardRecord,
    ModelParams,
    PrototypeHead,
    forward,
    head_backward,
    head_logits,
    log_softmax,
)
from mingle.nullspace import (
    InterferenceTracker,
    SubspaceBank,
    alignment_ratios,
    extract_task_subspace,
    relaxed_project,
)


@dataclass
class LowRankExpert:
    """``B @ A`` from a truncated SVD plus the task's bias delta ``c``."""

    b_factor: np.ndarray
    a_factor: np.ndarray
    bias: np.ndarray

    @property
    def rank(self) -> int:
        return self.a_factor.shape[0]

    def weight(self) -> np.ndarray:
        return self.b_factor @ self.a_factor

    def apply(self, h: np.ndarray) -> np.ndarray:
        return (h @ self.a_factor.T) @ self.b_factor.T + self.bias


@dataclass
class GateState:
    weight: np.ndarray
    bias: float = 0.0
    frozen: bool = False

    def apply(self, h: np.ndarray) -> np.ndarray:
        return h @ self.weight + self.bias

    def copy(self) -> GateState:
        return GateState(self.weight.copy(), float(self.bias), self.frozen)


@dataclass
class MergedModel:
    """Frozen base network plus per-layer experts and gates in task order."""

    base: ModelParams
    head: PrototypeHead
    experts: list[list[LowRankExpert]] = field(default_factory=list)
    gates: list[list[GateState]] = field(default_factory=list)
    enabled: list[bool] | None = None

    def __post_init__(self):
        if not self.experts:
            self.experts = [[] for _ in range(self.base.n_layers)]
        if not self.gates:
            self.gates = [[] for _ in range(self.base.n_layers)]
        if self.enabled is None:
            self.enabled = [True] * self.base.n_layers

    @property
    def n_tasks(self) -> int:
        return len(self.experts[0])

    def copy(self) -> MergedModel:
        # experts are never mutated after construction, so they are shared
        return MergedModel(
            self.base,
            self.head,
            [list(e) for e in self.experts],
            [[g.copy() for g in gs] for gs in self.gates],
            list(self.enabled),
        )

    def add_task(
        self,
        experts: list[LowRankExpert],
        freeze_previous: bool = True,
        gate_bias: float = 0.0,
        frozen: bool = False,
    ) -> None:
        if len(experts) != self.base.n_layers:
            raise ValueError("one expert per layer required")
        for l, e in enumerate(experts):
            d_out, d_in = self.base.layers[l][0].shape
            if e.b_factor.shape[0] != d_out or e.a_factor.shape[1] != d_in:
                raise ValueError(f"layer {l}: expert shape does not match base layer")
            if freeze_previous:
                for g in self.gates[l]:
                    g.frozen = True
            self.experts[l].append(e)
            self.gates[l].append(GateState(np.zeros(d_in), gate_bias, frozen))

    def expert_sum_svd(self, layer: int) -> SvdResult:
        """SVD of ``sum_i B_i A_i`` for the experts merged so far."""
        exps = self.experts[layer]
        d_out, d_in = self.base.layers[layer][0].shape
        if not exps:
            return svd(np.zeros((d_out, d_in)))
        b = np.hstack([e.b_factor for e in exps])
        a = np.vstack([e.a_factor for e in exps])
        return svd_of_product(b, a)

    def unfrozen(self) -> list[int]:
        return [i for i, g in enumerate(self.gates[0]) if not g.frozen]

    def checksum(self) -> float:
        return float(sum(np.sum(e.b_factor) * 1.7 + np.sum(e.a_factor) + np.sum(e.bias)
                         for exps in self.experts for e in exps))

    def to_dict(self, meta: dict | None = None) -> dict:
        doc = self.base.to_dict(meta)
        doc["head"] = {"prototypes": self.head.prototypes.tolist(),
                       "temperature": self.head.temperature}
        doc["enabled"] = list(self.enabled)
        doc["experts"] = [
            [{"b": e.b_factor.tolist(), "a": e.a_factor.tolist(), "bias": e.bias.tolist()}
             for e in exps]
            for exps in self.experts
        ]
        doc["gates"] = [
            [{"w": g.weight.tolist(), "b": g.bias, "frozen": g.frozen} for g in gs]
            for gs in self.gates
        ]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> MergedModel:
        base = ModelParams.from_dict(doc)
        head = PrototypeHead(np.array(doc["head"]["prototypes"]), doc["head"]["temperature"])
        experts = [
            [LowRankExpert(np.array(e["b"], dtype=np.float64).reshape(len(e["b"]), -1),
                           np.array(e["a"], dtype=np.float64).reshape(len(e["a"]), -1),
                           np.array(e["bias"], dtype=np.float64))
             for e in exps]
            for exps in doc["experts"]
        ]
        gates = [[GateState(np.array(g["w"], dtype=np.float64), float(g["b"]), bool(g["frozen"]))
                  for g in gs] for gs in doc["gates"]]
        return cls(base, head, experts, gates, list(doc.get("enabled", [])) or None)


def build_expert(
    delta: ModelParams,
    prior_sums: list | None,
    r: int,
    is_first_task: bool,
) -> list[LowRankExpert]:
    """Per-layer rank-``r`` experts from a task vector.

    For later tasks each weight delta first loses its diagonal coefficients
    in the singular bases of the previous experts' sum. ``prior_sums`` holds
    per-layer matrices or precomputed :class:`SvdResult` objects.
    """
    experts = []
    for l, (dw, db) in enumerate(delta.layers):
        if not 1 <= r <= min(dw.shape):
            raise ValueError(f"layer {l}: rank {r} exceeds layer dims {dw.shape}")
        if not is_first_task:
            if prior_sums is None:
                raise ValueError("prior expert sums required after the first task")
            prev = prior_sums[l]
            if not isinstance(prev, SvdResult):
                prev = svd(as_matrix(prev, "prior sum"))
            dw = project_orthogonal_complement(dw, prev)
        res = truncated_svd(dw, r)
        b_factor, a_factor = res.u * res.sigma, res.v.T.copy()
        if not is_first_task:
            a_factor = _zero_diagonal_coefficients(b_factor, a_factor, prev)
        experts.append(LowRankExpert(b_factor, a_factor, db.copy()))
    return experts


def _zero_diagonal_coefficients(b: np.ndarray, a: np.ndarray, prev: SvdResult) -> np.ndarray:
    """Smallest change to ``a`` making ``u_p^T (b a) v_p = 0`` for every prior direction.

    Truncating the projected delta to rank ``r`` reintroduces small diagonal
    coefficients; each constraint is linear in ``a`` with gradient
    ``(b^T u_p) v_p^T``, and these are mutually orthogonal because the
    ``v_p`` are, so the minimum-norm correction is a sum of independent
    rank-1 terms.
    """
    k = prev.rank()
    if k == 0:
        return a
    u, v = prev.u[:, :k], prev.v[:, :k]
    btu = b.T @ u
    norms = np.sum(btu * btu, axis=0)
    coef = np.einsum("ip,ij,jp->p", btu, a, v)
    scale = np.where(norms > 0, coef / np.where(norms > 0, norms, 1.0), 0.0)
    return a - (btu * scale) @ v.T


@dataclass
class MergedRecord(ForwardRecord):
    expert_out: list[list[np.ndarray]] = field(default_factory=list)
    gate_out: list[np.ndarray] = field(default_factory=list)


def merged_forward(model: MergedModel, inputs, classes=None):
    """Forward pass of the gated mixture.

    Returns ``(logits, record, gate_activations)``; ``gate_activations[l]``
    is an ``N x n_tasks`` array of gate scalars at layer ``l``.
    """
    h = as_matrix(inputs, "inputs")
    if h.shape[1] != model.base.d_in:
        raise ValueError(f"input dimension {h.shape[1]} != model d_in {model.base.d_in}")
    head = model.head if classes is None else model.head.subset(classes)
    rec = MergedRecord()
    n_layers = model.base.n_layers
    for l, (w, b) in enumerate(model.base.layers):
        rec.inputs.append(h)
        z = h @ w.T + b
        outs, gvals = [], np.zeros((h.shape[0], model.n_tasks))
        if model.enabled[l]:
            for i, (e, g) in enumerate(zip(model.experts[l], model.gates[l])):
                f = e.apply(h)
                gvals[:, i] = g.apply(h)
                z = z + gvals[:, i:i + 1] * f
                outs.append(f)
        rec.expert_out.append(outs)
        rec.gate_out.append(gvals)
        rec.preacts.append(z)
        h = np.maximum(z, 0.0) if l < n_layers - 1 else z
    return head_logits(h, head), rec, rec.gate_out


@dataclass
class SeedBuffer:
    """Unlabeled inputs of the current task used for test-time adaptation."""

    inputs: np.ndarray
    per_class: int = 5

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs, "seed inputs")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _kl_terms(logits: np.ndarray, ref_logits: np.ndarray):
    logp = log_softmax(logits)
    logq = log_softmax(ref_logits)
    p = np.exp(logp)
    kl = np.sum(p * (logp - logq), axis=1)
    return p, logp, logq, kl


def kl_adaptation_loss(model: MergedModel, reference: ModelParams, seed, classes=None) -> float:
    """Mean ``KL(p_merged || p_reference)`` over the seed inputs."""
    x = seed.inputs if isinstance(seed, SeedBuffer) else as_matrix(seed, "seed inputs")
    if x.shape[0] == 0:
        raise ValueError("empty seed buffer")
    head = model.head if classes is None else model.head.subset(classes)
    logits, _, _ = merged_forward(model, x, classes)
    ref_logits, _ = forward(reference, head, x)
    return float(np.mean(_kl_terms(logits, ref_logits)[3]))


def gate_gradients(model: MergedModel, reference: ModelParams, batch, classes=None):
    """Exact gradients of the KL loss w.r.t. every unfrozen gate.

    Returns ``(loss, grads)`` with ``grads[l]`` a dict mapping task index to
    ``(grad_weight, grad_bias)``.
    """
    x = batch.inputs if isinstance(batch, SeedBuffer) else as_matrix(batch, "batch")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    active = model.unfrozen()
    if not active:
        raise ValueError("no unfrozen gates to differentiate")
    head = model.head if classes is None else model.head.subset(classes)
    logits, rec, _ = merged_forward(model, x, classes)
    ref_logits, _ = forward(reference, head, x)
    p, logp, logq, kl = _kl_terms(logits, ref_logits)
    n = x.shape[0]
    dlogits = p * ((logp - logq) - kl[:, None]) / n
    dz = head_backward(rec.features, head, dlogits)

    grads: list[dict] = [dict() for _ in range(model.base.n_layers)]
    for l in reversed(range(model.base.n_layers)):
        h = rec.inputs[l]
        w = model.base.layers[l][0]
        dh = dz @ w if l > 0 else None
        if model.enabled[l]:
            for i, (e, g) in enumerate(zip(model.experts[l], model.gates[l])):
                f = rec.expert_out[l][i]
                dg = np.sum(dz * f, axis=1)
                if not g.frozen:
                    grads[l][i] = (dg @ h, float(dg.sum()))
                if dh is not None:
                    gv = rec.gate_out[l][:, i:i + 1]
                    dh = dh + ((gv * dz) @ e.b_factor) @ e.a_factor + np.outer(dg, g.weight)
        if l > 0:
            dz = dh * (rec.preacts[l - 1] > 0)
    return float(np.mean(kl)), grads


class _Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def direction(self, key, grad):
        grad = np.asarray(grad, dtype=np.float64)
        m = self.beta1 * self.m.get(key, 0.0) + (1 - self.beta1) * grad
        v = self.beta2 * self.v.get(key, 0.0) + (1 - self.beta2) * grad * grad
        self.m[key], self.v[key] = m, v
        mhat = m / (1 - self.beta1 ** self.t)
        vhat = v / (1 - self.beta2 ** self.t)
        return mhat / (np.sqrt(vhat) + self.eps)


def adapt_task(
    model: MergedModel,
    reference: ModelParams,
    seed,
    classes=None,
    bank: SubspaceBank | None = None,
    *,
    steps: int = 50,
    lr: float = 1e-4,
    batch_size: int = 16,
    rng_seed: int = 0,
    constraint: str = "relaxed",
    gamma: float = 1.0,
    beta: float = 0.99,
    update_bias: bool = True,
    trace: list | None = None,
) -> MergedModel:
    """Adam on the unfrozen gates to match the fine-tuned reference on ``seed``.

    With a non-empty ``bank`` the newest gate's weight update is pushed out
    of the protected span: ``constraint="hard"`` removes it entirely,
    ``"relaxed"`` shrinks each direction by ``exp(-gamma * S_p)`` where
    ``S_p`` is an EMA of the gradient's alignment with direction ``p``.
    The projector acts on the Adam step, so the weight itself never leaves
    the allowed subspace. Gate biases are never projected.
    """
    if constraint not in ("relaxed", "hard", "none"):
        raise ValueError(f"unknown constraint {constraint!r}")
    x = seed.inputs if isinstance(seed, SeedBuffer) else as_matrix(seed, "seed inputs")
    if x.shape[0] == 0:
        raise ValueError("empty seed buffer")
    model = model.copy()
    newest = model.n_tasks - 1
    n_layers = model.base.n_layers
    use_bank = (
        constraint != "none"
        and bank is not None
        and newest > 0
        and any(bank.n_columns(l) for l in range(n_layers))
    )
    tracker = InterferenceTracker(
        [bank.n_columns(l) for l in range(n_layers)] if use_bank else [0] * n_layers,
        beta=beta,
        gamma=gamma,
    )
    rng = np.random.default_rng(rng_seed)
    opt = _Adam(lr)
    for step in range(1, steps + 1):
        if batch_size < x.shape[0]:
            idx = np.sort(rng.choice(x.shape[0], size=batch_size, replace=False))
            xb = x[idx]
        else:
            xb = x
        _, grads = gate_gradients(model, reference, xb, classes)
        opt.t = step
        tracker.step = step
        for l in range(n_layers):
            for i, (gw, gb) in grads[l].items():
                gate = model.gates[l][i]
                dw = opt.direction((l, i, "w"), gw)
                if use_bank and i == newest and bank.n_columns(l):
                    basis = bank.bases[l]
                    ratios = alignment_ratios(gw, basis)
                    if constraint == "hard":
                        lambdas = np.ones(basis.shape[1])
                    else:
                        tracker.observe(l, ratios)
                        lambdas = tracker.lambdas(l)
                    dw = relaxed_project(dw, basis, lambdas)
                    if trace is not None:
                        trace.append((step, l, float(ratios.mean()),
                                      float(tracker.scores[l].mean()), float(lambdas.mean())))
                gate.weight = gate.weight - lr * dw
                if update_bias:
                    gate.bias = float(gate.bias - lr * opt.direction((l, i, "b"), gb))
    return model


def update_bank(model: MergedModel, bank: SubspaceBank, seed_inputs, k: int | None = None) -> SubspaceBank:
    """Add the dominant directions of each layer's inputs on ``seed_inputs``."""
    k = bank.k if k is None else k
    _, rec, _ = merged_forward(model, seed_inputs)
    out = bank.copy()
    for l, h in enumerate(rec.inputs):
        out.augment(l, extract_task_subspace(h, min(k, h.shape[1], h.shape[0])))
    return out
