"""A small dense-network substrate with hand-written backprop.

Parameters of a network live in one flat float64 vector. Layer ``l`` is
stored row-major as an augmented ``out x (in + 1)`` block whose last
column is the bias, so every parameter has a stable ``(layer, row, col)``
address with ``col == fan_in`` naming the bias.

Matrix-valued loss heads (the square-root Jeffery loss) inject their
gradient at the covariance level and are chained back to per-sample
outputs through the explicit centered quadratic covariance map.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from vncond import spd
from vncond.spd import DatasetBatch, GradientMode

log = logging.getLogger(__name__)

Activation = Literal["relu", "identity"]
LossKind = Literal["jvn_sqrt", "rmse", "mse", "softmax_cross_entropy"]

# below this J the square-root loss is treated as sitting at its minimum
JVN_FLAT = 1e-12


class DenseNet:
    def __init__(self, sizes: Sequence[int], activations: Sequence[str],
                 params: np.ndarray | None = None, dropout: float = 0.0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes}")
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in ("relu", "identity"):
                raise ValueError(f"unknown activation {a!r}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {dropout}")
        self.sizes = sizes
        self.activations = list(activations)
        self.dropout = float(dropout)
        self._offsets = [0]
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self._offsets.append(self._offsets[-1] + fan_out * (fan_in + 1))
        if params is None:
            params = np.zeros(self._offsets[-1])
        params = np.array(params, dtype=np.float64)
        if params.shape != (self._offsets[-1],):
            raise ValueError(f"expected {self._offsets[-1]} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator,
             hidden: Activation = "relu", output: Activation = "identity",
             dropout: float = 0.0) -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        acts = [hidden] * (len(sizes) - 2) + [output]
        net = cls(sizes, acts, dropout=dropout)
        for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            net.weight(l)[...] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        return net

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return self._offsets[-1]

    @property
    def in_features(self) -> int:
        return self.sizes[0]

    @property
    def out_features(self) -> int:
        return self.sizes[-1]

    def layer_slice(self, l: int) -> slice:
        return slice(self._offsets[l], self._offsets[l + 1])

    def augmented(self, l: int) -> np.ndarray:
        return self.params[self.layer_slice(l)].reshape(self.sizes[l + 1], self.sizes[l] + 1)

    def weight(self, l: int) -> np.ndarray:
        return self.augmented(l)[:, :-1]

    def bias(self, l: int) -> np.ndarray:
        return self.augmented(l)[:, -1]

    def param_index(self, layer: int, row: int, col: int) -> int:
        fan_in, fan_out = self.sizes[layer], self.sizes[layer + 1]
        if not (0 <= row < fan_out and 0 <= col <= fan_in):
            raise IndexError(f"({layer}, {row}, {col}) outside layer of shape {fan_out}x{fan_in}+1")
        return self._offsets[layer] + row * (fan_in + 1) + col

    def copy(self) -> "DenseNet":
        return DenseNet(self.sizes, self.activations, self.params.copy(), self.dropout)

    def __repr__(self):
        return f"DenseNet({self.sizes}, {self.activations})"


@dataclass
class ForwardPass:
    inputs: np.ndarray
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]

    def hidden(self, l: int) -> np.ndarray:
        """Post-activation output of layer ``l`` (before dropout)."""
        return self.post[l]


def forward(net: DenseNet, x: np.ndarray, train: bool = False,
            rng: np.random.Generator | None = None) -> ForwardPass:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != net.in_features:
        raise ValueError(f"input width {x.shape[1]} != network input {net.in_features}")
    fp = ForwardPass(inputs=x)
    a = x
    for l in range(net.n_layers):
        z = a @ net.weight(l).T + net.bias(l)
        h = np.maximum(z, 0.0) if net.activations[l] == "relu" else z
        fp.pre.append(z)
        fp.post.append(h)
        mask = None
        if train and net.dropout > 0.0 and l < net.n_layers - 1:
            if rng is None:
                raise ValueError("dropout during training needs an rng")
            keep = 1.0 - net.dropout
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        fp.masks.append(mask)
        a = h
    if not np.all(np.isfinite(a)):
        raise spd.NumericalFailure("non-finite network output")
    return fp


def backward(net: DenseNet, fp: ForwardPass, grad_out: np.ndarray):
    """Return (flat parameter gradient, gradient w.r.t. the inputs)."""
    grad = np.zeros(net.n_params)
    g = np.asarray(grad_out, dtype=np.float64)
    for l in reversed(range(net.n_layers)):
        if fp.masks[l] is not None:
            g = g * fp.masks[l]
        if net.activations[l] == "relu":
            g = g * (fp.pre[l] > 0.0)
        a_in = fp.inputs if l == 0 else _layer_input(fp, l)
        block = grad[net.layer_slice(l)].reshape(net.sizes[l + 1], net.sizes[l] + 1)
        block[:, :-1] = g.T @ a_in
        block[:, -1] = g.sum(axis=0)
        g = g @ net.weight(l)
    return grad, g


def _layer_input(fp: ForwardPass, l: int) -> np.ndarray:
    h = fp.post[l - 1]
    m = fp.masks[l - 1]
    return h if m is None else h * m


def stack_forward(nets: Sequence[DenseNet], x, train=False, rng=None) -> list[ForwardPass]:
    passes = []
    a = x
    for net in nets:
        fp = forward(net, a, train=train, rng=rng)
        passes.append(fp)
        a = fp.output
    return passes


def stack_backward(nets: Sequence[DenseNet], passes: Sequence[ForwardPass], grad_out):
    grads = [None] * len(nets)
    g = grad_out
    for i in reversed(range(len(nets))):
        grads[i], g = backward(nets[i], passes[i], g)
    return grads, g


def stack_params(nets: Sequence[DenseNet]) -> np.ndarray:
    return np.concatenate([n.params for n in nets])


def set_stack_params(nets: Sequence[DenseNet], flat: np.ndarray):
    i = 0
    for n in nets:
        n.params[...] = flat[i:i + n.n_params]
        i += n.n_params


# ---------------------------------------------------------------------------
# losses: each returns (value, d value / d prediction)


def mse_loss(pred, y):
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(pred.shape)
    diff = pred - y
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def rmse_loss(pred, y):
    value, grad = mse_loss(pred, y)
    root = np.sqrt(value)
    if root < 1e-15:
        return 0.0, np.zeros_like(grad)
    return float(root), grad / (2.0 * root)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy; ``labels`` are integer class ids."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).ravel()
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    value = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return value, grad / n


def sqrt_jeffery_pair(a: np.ndarray, b1: np.ndarray, b2: np.ndarray,
                      mode: GradientMode = "daleckii_krein"):
    """``sqrt(J(cov[a, b1], cov[a, b2]))`` and its gradients w.r.t. a, b1, b2.

    Both covariances share the leading block ``a`` and therefore share the
    same jitter. Returns ``(value, da, db1, db2)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b1 = np.asarray(b1, dtype=np.float64)
    b2 = np.asarray(b2, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    b1 = b1.reshape(a.shape[0], -1)
    b2 = b2.reshape(a.shape[0], -1)
    n, p = a.shape
    z1 = np.hstack([a, b1])
    z2 = np.hstack([a, b2])
    c1, eps = spd.raw_covariance(z1, feature_dim=p)
    c2, _ = spd.raw_covariance(z2, feature_dim=p)
    eye = np.eye(c1.shape[0])
    s1 = spd.SpdMatrix(c1 + eps * eye)
    s2 = spd.SpdMatrix(c2 + eps * eye)
    j = spd.jeffery_divergence(s1, s2)
    if j < JVN_FLAT:
        return float(np.sqrt(j)), np.zeros_like(a), np.zeros_like(b1), np.zeros_like(b2)
    root = np.sqrt(j)
    g1, g2 = spd.divergence_gradient(s1, s2, mode)
    g1 = g1 / (2.0 * root)
    g2 = g2 / (2.0 * root)
    zc1 = z1 - z1.mean(axis=0)
    zc2 = z2 - z2.mean(axis=0)
    dz1 = (2.0 / n) * zc1 @ g1
    dz2 = (2.0 / n) * zc2 @ g2
    da = dz1[:, :p] + dz2[:, :p]
    ac = zc1[:, :p]
    if np.trace(c1[:p, :p]) / p > spd.JITTER_SCALE_FLOOR:
        # jitter scales with the mean variance of a
        da = da + (np.trace(g1) + np.trace(g2)) * spd.JITTER_REL / p * (2.0 / n) * ac
    return float(root), da, dz1[:, p:], dz2[:, p:]


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = "mse"
    grad_mode: GradientMode = "daleckii_krein"

    def __post_init__(self):
        if self.kind not in ("jvn_sqrt", "rmse", "mse", "softmax_cross_entropy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.grad_mode not in ("daleckii_krein", "paper_closed_form"):
            raise ValueError(f"unknown gradient mode {self.grad_mode!r}")


def head_loss(spec: LossSpec, cov_inputs: np.ndarray, pred: np.ndarray, y: np.ndarray):
    """Loss value and gradient w.r.t. predictions for any supported head."""
    if spec.kind == "mse":
        return mse_loss(pred, y)
    if spec.kind == "rmse":
        return rmse_loss(pred, y)
    if spec.kind == "softmax_cross_entropy":
        return softmax_cross_entropy(pred, y)
    if pred.shape[0] < 2:
        raise ValueError("jvn_sqrt needs at least 2 samples")
    value, _, dpred, _ = sqrt_jeffery_pair(cov_inputs, pred, y, spec.grad_mode)
    return value, dpred


def loss_and_gradient(nets: DenseNet | Sequence[DenseNet], batch: DatasetBatch, spec: LossSpec,
                      train: bool = False, rng: np.random.Generator | None = None):
    """Loss on ``batch`` and the flat gradient over all parameters of ``nets``.

    For ``jvn_sqrt`` the covariance pairs the raw batch features with the
    prediction (respectively the target).
    """
    if isinstance(nets, DenseNet):
        nets = [nets]
    if batch.response is None:
        raise ValueError(f"{spec.kind} needs a labeled batch")
    passes = stack_forward(nets, batch.features, train=train, rng=rng)
    pred = passes[-1].output
    y = batch.response
    if spec.kind == "softmax_cross_entropy":
        y = y.ravel()
    value, gpred = head_loss(spec, batch.features, pred, y)
    grads, _ = stack_backward(nets, passes, gpred)
    return value, np.concatenate(grads)


# ---------------------------------------------------------------------------
# prediction with a post-hoc mean offset


class Regressor:
    """A stack of networks whose prediction is shifted by a scalar offset."""

    def __init__(self, nets: Sequence[DenseNet], offset: float = 0.0):
        self.nets = list(nets)
        self.offset = float(offset)

    def raw(self, x) -> np.ndarray:
        return stack_forward(self.nets, x)[-1].output

    def predict(self, x) -> np.ndarray:
        return self.raw(x) + self.offset


def bias_offset(pred, y) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("bias offset of an empty batch")
    return float(np.mean(y - pred))


def apply_bias_offset(model: Regressor, batch: DatasetBatch) -> float:
    """Set ``model.offset`` to the mean training residual and return it."""
    if batch.response is None:
        raise ValueError("bias offset needs a labeled batch")
    model.offset = bias_offset(model.raw(batch.features), batch.response)
    return model.offset


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class Optimizer:
    kind: Literal["sgd", "adam"] = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    rejected: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        grads = np.asarray(grads, dtype=np.float64)
        if params.shape != grads.shape:
            raise ValueError(f"params {params.shape} and grads {grads.shape} differ")
        if not np.all(np.isfinite(grads)):
            self.rejected += 1
            log.warning("rejected optimizer step with non-finite gradient")
            return params.copy()
        self.t += 1
        if self.kind == "sgd":
            return params - self.lr * grads
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(params, grads, opt: Optimizer) -> np.ndarray:
    return opt.step(params, grads)


def update(net: DenseNet, grads: np.ndarray, opt: Optimizer):
    net.params[...] = opt.step(net.params, grads)


# ---------------------------------------------------------------------------
# parameter snapshots


def save_params(net: DenseNet, path: str | Path):
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json``."""
    path = Path(path)
    net.params.astype("<f8").tofile(path.with_suffix(".bin"))
    meta = {"sizes": net.sizes, "activations": net.activations, "dropout": net.dropout,
            "layers": [{"weight": [o, i], "bias": [o]}
                       for i, o in zip(net.sizes[:-1], net.sizes[1:])]}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_params(path: str | Path) -> DenseNet:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    return DenseNet(meta["sizes"], meta["activations"], flat.astype(np.float64),
                    meta.get("dropout", 0.0))
