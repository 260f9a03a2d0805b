"""Dense-network kernel: forward/backward passes, losses, momentum SGD.

Everything is plain float64 numpy. Gradients are exact analytic derivatives
of the implemented losses; the test suite checks them against central finite
differences. No autodiff, no convolutions, no GPU.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, SamplingError, ShapeError

NORM_FLOOR = 1e-12

_ACTIVATIONS = ("tanh", "relu")


def _as_matrix(x, name: str = "array") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise DegenerateInputError(f"non-finite values in {what}")
    return a


@dataclass
class Encoder:
    """Fully connected feature extractor.

    ``weights[i]`` has shape (d_out, d_in); consecutive layers must chain.
    The activation is applied between layers, never after the last one, so a
    single-layer encoder is a plain affine map.
    """

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must be non-empty and aligned")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} expects input dim {w.shape[1]}, "
                    f"previous layer emits {self.weights[i - 1].shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list:
        """Flat parameter list, [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def with_parameters(self, params: list) -> "Encoder":
        """New encoder with the same layout and the given flat parameter list."""
        if len(params) != 2 * len(self.weights):
            raise ShapeError("parameter list length does not match encoder layout")
        ws = [np.asarray(params[2 * i], dtype=np.float64) for i in range(len(self.weights))]
        bs = [np.asarray(params[2 * i + 1], dtype=np.float64) for i in range(len(self.weights))]
        return Encoder(ws, bs, self.activation)

    def copy(self) -> "Encoder":
        return Encoder([w.copy() for w in self.weights],
                       [b.copy() for b in self.biases], self.activation)


@dataclass
class Classifier:
    """Per-client linear head, one row per local identity."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("classifier weight must be 2-d and bias 1-d")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError("classifier weight and bias row counts differ")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list:
        return [self.weight, self.bias]

    def with_parameters(self, params: list) -> "Classifier":
        return Classifier(np.asarray(params[0], dtype=np.float64),
                          np.asarray(params[1], dtype=np.float64))

    def copy(self) -> "Classifier":
        return Classifier(self.weight.copy(), self.bias.copy())

    def logits(self, features: np.ndarray) -> np.ndarray:
        f = _as_matrix(features, "features")
        if f.shape[1] != self.weight.shape[1]:
            raise ShapeError("feature dim does not match classifier")
        return f @ self.weight.T + self.bias


@dataclass
class LossConfig:
    """Knobs shared by the three training losses."""

    temperature: float = 0.05
    triplet_margin: float = 0.3
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.triplet_margin < 0:
            raise ConfigError("triplet_margin must be non-negative")
        if not (0.0 <= self.label_smoothing < 0.5):
            raise ConfigError("label_smoothing must lie in [0, 0.5)")


def init_encoder(rng: np.random.Generator, dims, activation: str = "tanh") -> Encoder:
    """Random encoder with Xavier-scaled weights and zero biases.

    ``dims`` is the full chain (d_in, hidden..., d_out).
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ConfigError("encoder needs at least input and output dims")
    ws, bs = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(2.0 / (d_in + d_out))
        ws.append(rng.normal(0.0, scale, size=(d_out, d_in)))
        bs.append(np.zeros(d_out))
    return Encoder(ws, bs, activation)


def init_classifier(rng: np.random.Generator, num_classes: int, feature_dim: int) -> Classifier:
    scale = 1.0 / np.sqrt(feature_dim)
    return Classifier(rng.normal(0.0, scale, size=(num_classes, feature_dim)),
                      np.zeros(num_classes))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(z: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - post * post
    return (z > 0.0).astype(np.float64)


def forward_encoder(encoder: Encoder, batch) -> np.ndarray:
    """Deterministic forward map of each input row; pure in (encoder, batch)."""
    out, _ = forward_encoder_cached(encoder, batch)
    return out


def forward_encoder_cached(encoder: Encoder, batch):
    """Forward pass that also returns the per-layer cache used by backward."""
    x = _as_matrix(batch, "batch")
    if x.shape[1] != encoder.input_dim:
        raise ShapeError(
            f"batch has {x.shape[1]} columns, encoder expects {encoder.input_dim}"
        )
    last = len(encoder.weights) - 1
    inputs = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(zip(encoder.weights, encoder.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = _activate(z, encoder.activation) if i < last else z
        inputs.append(h)
    _check_finite(h, "encoder output")
    return h, {"inputs": inputs, "pre": pre}


def backward_encoder(encoder: Encoder, cache, grad_output: np.ndarray):
    """Backpropagate ``grad_output`` (dL/dfeatures) through a cached forward.

    Returns (parameter gradients aligned with ``encoder.parameters()``,
    gradient with respect to the input batch).
    """
    last = len(encoder.weights) - 1
    g = _as_matrix(grad_output, "grad_output")
    grads = [None] * (2 * len(encoder.weights))
    for i in range(last, -1, -1):
        if i < last:
            g = g * _activation_grad(cache["pre"][i], cache["inputs"][i + 1],
                                     encoder.activation)
        h_in = cache["inputs"][i]
        grads[2 * i] = g.T @ h_in
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ encoder.weights[i]
    return grads, g


def l2_normalize(v) -> np.ndarray:
    """Rows rescaled to unit Euclidean norm; rejects near-zero rows loudly."""
    a = np.asarray(v, dtype=np.float64)
    squeeze = a.ndim == 1
    if squeeze:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected 1-d or 2-d input, got shape {a.shape}")
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms <= NORM_FLOOR) or not np.all(np.isfinite(norms)):
        raise DegenerateInputError("cannot normalize rows with near-zero norm")
    out = a / norms[:, None]
    return out[0] if squeeze else out


def l2_normalize_backward(v: np.ndarray, grad_normalized: np.ndarray) -> np.ndarray:
    """Gradient of row-wise L2 normalization at ``v``."""
    a = _as_matrix(v, "v")
    g = _as_matrix(grad_normalized, "grad")
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms <= NORM_FLOOR):
        raise DegenerateInputError("cannot differentiate through near-zero rows")
    u = a / norms
    return (g - (g * u).sum(axis=1, keepdims=True) * u) / norms


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ShapeError("labels must be 1-d")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise IndexError(f"label outside [0, {num_classes})")
    return y.astype(np.intp)


def cross_entropy_loss(logits, labels, label_smoothing: float = 0.0):
    """Mean negative log softmax of the true class, with its exact gradient.

    With smoothing eps the target distribution is (1-eps) on the true class
    plus eps/P spread uniformly.
    """
    z = _as_matrix(logits, "logits")
    n, p = z.shape
    y = _check_labels(labels, p)
    if y.shape[0] != n:
        raise ShapeError("labels length does not match logits rows")
    logp = _log_softmax(z)
    target = np.full_like(z, label_smoothing / p)
    target[np.arange(n), y] += 1.0 - label_smoothing
    loss = float(-(target * logp).sum() / n)
    grad = (np.exp(logp) - target) / n
    return loss, grad


def _pairwise_distances(features: np.ndarray) -> np.ndarray:
    sq = (features * features).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (features @ features.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def triplet_loss(features, labels, margin: float):
    """Batch-hard triplet loss with Euclidean distances.

    Per anchor the hardest positive (max distance, self excluded) and hardest
    negative (min distance) form one hinge term; the batch must contain at
    least two identities with at least two instances each.
    """
    f = _as_matrix(features, "features")
    n = f.shape[0]
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError("labels length does not match feature rows")
    same = y[:, None] == y[None, :]
    counts = same.sum(axis=1)
    if n < 4 or np.unique(y).size < 2 or np.any(counts < 2):
        raise SamplingError(
            "batch-hard mining needs >= 2 identities with >= 2 instances each"
        )
    dist = _pairwise_distances(f)
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same

    pos_dist = np.where(pos_mask, dist, -np.inf)
    neg_dist = np.where(neg_mask, dist, np.inf)
    hardest_pos = pos_dist.argmax(axis=1)
    hardest_neg = neg_dist.argmin(axis=1)
    rows = np.arange(n)
    d_ap = dist[rows, hardest_pos]
    d_an = dist[rows, hardest_neg]
    hinge = d_ap - d_an + margin
    active = hinge > 0.0
    loss = float(np.maximum(hinge, 0.0).mean())

    grad = np.zeros_like(f)
    for a in rows[active]:
        p = hardest_pos[a]
        ng = hardest_neg[a]
        if d_ap[a] > NORM_FLOOR:
            u = (f[a] - f[p]) / d_ap[a]
            grad[a] += u
            grad[p] -= u
        if d_an[a] > NORM_FLOOR:
            v = (f[a] - f[ng]) / d_an[a]
            grad[a] -= v
            grad[ng] += v
    grad /= n
    return loss, grad


def recognition_loss(features, labels, prototypes, temperature: float):
    """Prototype softmax loss on dot-product similarities.

    ``features`` rows are expected unit-norm (the caller normalizes);
    prototypes act as constants, so the gradient flows to features only.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    f = _as_matrix(features, "features")
    m = _as_matrix(prototypes, "prototypes")
    if f.shape[1] != m.shape[1]:
        raise ShapeError("feature and prototype dims differ")
    y = _check_labels(labels, m.shape[0])
    if y.shape[0] != f.shape[0]:
        raise ShapeError("labels length does not match feature rows")
    n = f.shape[0]
    logits = (f @ m.T) / temperature
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    grad = (dlogits @ m) / (n * temperature)
    return loss, grad


@dataclass
class SgdState:
    """Momentum SGD state plus its multistep learning-rate schedule."""

    base_lr: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    milestones: tuple = (20, 40)
    gamma: float = 0.1
    current_lr: float = field(default=None)
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must lie in [0, 1)")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError("gamma must lie in (0, 1]")
        self.milestones = tuple(sorted(int(m) for m in self.milestones))
        if self.current_lr is None:
            self.current_lr = self.base_lr


def sgd_for(params: list, **kwargs) -> SgdState:
    """SGD state with zero velocity buffers mirroring ``params`` shapes."""
    state = SgdState(**kwargs)
    state.velocity = [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params]
    return state


def sgd_step(params: list, grads: list, state: SgdState) -> list:
    """One classic momentum step: v <- mu v + (g + wd * p); p <- p - lr v."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ShapeError("params, grads and velocity lists must align")
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or p.shape != state.velocity[i].shape:
            raise ShapeError(f"parameter {i}: shape mismatch between param/grad/velocity")
        v = state.momentum * state.velocity[i] + (g + state.weight_decay * p)
        state.velocity[i] = v
        new_params.append(p - state.current_lr * v)
    return new_params


def update_lr(state: SgdState, epoch: int) -> float:
    """Multistep schedule: base_lr * gamma^(number of milestones <= epoch)."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    passed = bisect.bisect_right(state.milestones, epoch)
    state.current_lr = state.base_lr * state.gamma**passed
    return state.current_lr


def render_encoder(encoder: Encoder) -> str:
    """Canonical text dump, bit-exact round-trip at 17 significant digits."""
    lines = ["fedstyle-encoder 1",
             f"{len(encoder.weights)} {encoder.activation}"]
    for w, b in zip(encoder.weights, encoder.biases):
        lines.append(f"{w.shape[0]} {w.shape[1]}")
        for row in w:
            lines.append(" ".join(f"{v:.17g}" for v in row))
        lines.append(" ".join(f"{v:.17g}" for v in b))
    return "\n".join(lines) + "\n"


def save_encoder(encoder: Encoder, path) -> None:
    with open(path, "w") as fh:
        fh.write(render_encoder(encoder))


def load_encoder(path) -> Encoder:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "fedstyle-encoder 1":
        raise ConfigError(f"{path}: not an encoder checkpoint")
    count_str, activation = lines[1].split()
    pos = 2
    ws, bs = [], []
    for _ in range(int(count_str)):
        d_out, d_in = (int(v) for v in lines[pos].split())
        pos += 1
        w = np.asarray([[float(v) for v in lines[pos + r].split()]
                        for r in range(d_out)])
        pos += d_out
        b = np.asarray([float(v) for v in lines[pos].split()])
        pos += 1
        if w.shape != (d_out, d_in) or b.shape != (d_out,):
            raise ConfigError(f"{path}: truncated layer block")
        ws.append(w)
        bs.append(b)
    return Encoder(ws, bs, activation)
