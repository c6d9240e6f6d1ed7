"""Local learnable state and training math.

Two model families: plain softmax regression ("linear-softmax") and a
one-hidden-layer tanh network ("one-hidden-layer"). The loss is mean
cross-entropy plus an optional L2 penalty on all parameters; gradients are
analytic and checked against central finite differences in the test suite.
A node's local update is plain SGD scaled by the context gate: parameters
move by -lr * gate * gradient.

All arithmetic is float64. Ties in argmax predictions resolve to the lowest
class index, which makes accuracy deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigurationError, ShapeError, UsageError

MODE_LINEAR = "linear-softmax"
MODE_MLP = "one-hidden-layer"
MODES = (MODE_LINEAR, MODE_MLP)


@dataclass
class TrainingConfig:
    learning_rate: float = 0.05
    batch_size: int = 8
    mode: str = MODE_LINEAR
    hidden_dim: int = 16
    l2_penalty: float = 0.0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown model mode {self.mode!r}")
        if self.mode == MODE_MLP and self.hidden_dim < 1:
            raise ConfigurationError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.l2_penalty < 0:
            raise ConfigurationError(f"l2_penalty must be >= 0, got {self.l2_penalty}")


@dataclass
class ModelParams:
    """Learnable state: optional trunk (feature transform) plus softmax head."""

    head: np.ndarray                      # (in_dim, classes)
    bias: np.ndarray                      # (classes,)
    trunk: Optional[np.ndarray] = None    # (features, hidden) in MLP mode
    version: int = 0

    @property
    def class_count(self) -> int:
        return self.head.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.trunk.shape[0] if self.trunk is not None else self.head.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            head=self.head.copy(),
            bias=self.bias.copy(),
            trunk=None if self.trunk is None else self.trunk.copy(),
            version=self.version,
        )

    def flat(self) -> np.ndarray:
        parts = [] if self.trunk is None else [self.trunk.ravel()]
        return np.concatenate(parts + [self.head.ravel(), self.bias.ravel()])

    def real_count(self) -> int:
        n = self.head.size + self.bias.size
        if self.trunk is not None:
            n += self.trunk.size
        return n

    def assert_finite(self) -> None:
        for name, arr in (("head", self.head), ("bias", self.bias), ("trunk", self.trunk)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ShapeError(f"non-finite entries in {name}")


class Gradients(NamedTuple):
    head: np.ndarray
    bias: np.ndarray
    trunk: Optional[np.ndarray]


@dataclass
class Batch:
    """A labelled minibatch: features (n, d) and integer labels (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class ProbeSet:
    """Small labelled reference batch, identical on every node for a run."""

    x: np.ndarray
    y: np.ndarray
    digest: str = field(default="")

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if not self.digest:
            import hashlib

            h = hashlib.sha256()
            h.update(self.x.tobytes())
            h.update(self.y.tobytes())
            self.digest = h.hexdigest()[:16]

    @property
    def size(self) -> int:
        return self.x.shape[0]


def init_params(seed: int, cfg: TrainingConfig, feature_dim: int, class_count: int) -> ModelParams:
    """Seeded init: uniform entries with scale 1/sqrt(fan-in), zero bias."""
    if feature_dim < 1:
        raise ConfigurationError(f"feature_dim must be >= 1, got {feature_dim}")
    if class_count < 2:
        raise ConfigurationError(f"class_count must be >= 2, got {class_count}")
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    if cfg.mode == MODE_LINEAR:
        s = 1.0 / np.sqrt(feature_dim)
        head = rng.uniform(-s, s, size=(feature_dim, class_count))
        trunk = None
    else:
        s_t = 1.0 / np.sqrt(feature_dim)
        trunk = rng.uniform(-s_t, s_t, size=(feature_dim, cfg.hidden_dim))
        s_h = 1.0 / np.sqrt(cfg.hidden_dim)
        head = rng.uniform(-s_h, s_h, size=(cfg.hidden_dim, class_count))
    bias = np.zeros(class_count)
    return ModelParams(head=head, bias=bias, trunk=trunk, version=0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: ModelParams, x: np.ndarray):
    """Class probabilities (n, k) and hidden activations (or None) for inputs (n, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.feature_dim:
        raise ShapeError(
            f"input dim {x.shape[1]} does not match model feature dim {params.feature_dim}"
        )
    if params.trunk is not None:
        hidden = np.tanh(x @ params.trunk)
        logits = hidden @ params.head + params.bias
    else:
        hidden = None
        logits = x @ params.head + params.bias
    return _softmax(logits), hidden


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Probability vector for a single feature vector."""
    probs, _ = forward(params, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return probs[0]


def probe_logits(params: ModelParams, probe: ProbeSet) -> np.ndarray:
    """Raw logits (m, k) on the shared probe set."""
    x = probe.x
    if params.trunk is not None:
        return np.tanh(x @ params.trunk) @ params.head + params.bias
    return x @ params.head + params.bias


def _l2_term(params: ModelParams, l2: float) -> float:
    if l2 == 0.0:
        return 0.0
    t = float(np.sum(params.head ** 2) + np.sum(params.bias ** 2))
    if params.trunk is not None:
        t += float(np.sum(params.trunk ** 2))
    return l2 * t


def _targets(y: np.ndarray, class_count: int) -> np.ndarray:
    """Accept integer labels or a row-stochastic target matrix."""
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(np.float64)
    onehot = np.zeros((y.shape[0], class_count))
    onehot[np.arange(y.shape[0]), y.astype(np.int64)] = 1.0
    return onehot


def loss(params: ModelParams, batch: Batch, l2_penalty: float = 0.0) -> float:
    """Mean cross-entropy over the batch plus l2_penalty * squared parameter norm."""
    if len(batch) == 0:
        raise UsageError("loss requires a nonempty batch")
    probs, _ = forward(params, batch.x)
    targets = _targets(batch.y, params.class_count)
    ce = -float(np.mean(np.sum(targets * np.log(np.clip(probs, 1e-300, None)), axis=1)))
    return ce + _l2_term(params, l2_penalty)


def grad(params: ModelParams, batch: Batch, l2_penalty: float = 0.0) -> Gradients:
    """Analytic gradient of `loss` with respect to every parameter array."""
    if len(batch) == 0:
        raise UsageError("grad requires a nonempty batch")
    x = np.atleast_2d(batch.x)
    n = x.shape[0]
    probs, hidden = forward(params, x)
    targets = _targets(batch.y, params.class_count)
    dlogits = (probs - targets) / n
    if params.trunk is not None:
        d_head = hidden.T @ dlogits
        d_hidden = dlogits @ params.head.T
        d_pre = d_hidden * (1.0 - hidden ** 2)
        d_trunk = x.T @ d_pre
    else:
        d_head = x.T @ dlogits
        d_trunk = None
    d_bias = dlogits.sum(axis=0)
    if l2_penalty:
        d_head = d_head + 2.0 * l2_penalty * params.head
        d_bias = d_bias + 2.0 * l2_penalty * params.bias
        if d_trunk is not None:
            d_trunk = d_trunk + 2.0 * l2_penalty * params.trunk
    return Gradients(head=d_head, bias=d_bias, trunk=d_trunk)


def apply_gradient(params: ModelParams, g: Gradients, step_size: float) -> None:
    """In-place descent step; bumps the version counter."""
    params.head -= step_size * g.head
    params.bias -= step_size * g.bias
    if params.trunk is not None and g.trunk is not None:
        params.trunk -= step_size * g.trunk
    params.version += 1


def evaluate_accuracy(params: ModelParams, batch: Batch) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    if len(batch) == 0:
        raise UsageError("evaluate_accuracy requires a nonempty test set")
    probs, _ = forward(params, batch.x)
    pred = np.argmax(probs, axis=1)  # np.argmax picks the first (lowest) index on ties
    return float(np.mean(pred == batch.y))


def local_step(node, batch: Batch, cfg: TrainingConfig, tick: int = 0, events=None):
    """One gated SGD step on `node` in place.

    Skips (and records an event) when the node cannot pay the per-step energy
    cost or when the context gate is zero; a skipped step changes nothing.
    Returns the node.
    """
    from .context import gate as context_gate

    if len(batch) == 0:
        raise UsageError("local_step requires a nonempty batch")
    if node.energy_j < node.step_cost_j:
        node.skipped_updates += 1
        if events is not None:
            events.append({"tick": tick, "node": node.node_id, "kind": "skipped-update",
                           "reason": "energy"})
        return node
    omega = 1.0 if node.gating == "off" else context_gate(node.context)
    if omega == 0.0:
        # A zero gate suppresses the whole step: no gradient work, no cost.
        node.skipped_updates += 1
        if events is not None:
            events.append({"tick": tick, "node": node.node_id, "kind": "skipped-update",
                           "reason": "gate-zero"})
        return node
    g = grad(node.params, batch, cfg.l2_penalty)
    apply_gradient(node.params, g, cfg.learning_rate * omega)
    node.spend(tick, "step", node.step_cost_j)
    node.update_count += 1
    return node
