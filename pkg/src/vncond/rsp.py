"""Continual learning with EWC and the representation similarity penalty.

Hidden neurons are grouped into modules after the first task. For every
previous task the penalty weight of a module is a softmax over the negative
conditional divergence between the stored and the current ``p(y | module)``:
modules whose input-output relation still looks like the old task are held
in place, modules that already moved are left free. Parameters not owned by
any module (first layer and biases) fall back to Fisher weighting.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from vncond import nn, spd
from vncond.datagen import ClassificationTask
from vncond.nn import DenseNet
from vncond.spd import DatasetBatch, JointCovariance

log = logging.getLogger(__name__)

Method = Literal["sgd", "ewc", "rsp"]


# ---------------------------------------------------------------------------
# modularization


@dataclass(frozen=True)
class NeuronGrouping:
    """``groups[d][k]`` holds the sorted neuron indices of group k in hidden layer d."""

    widths: tuple
    groups: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        groups = tuple(tuple(np.asarray(g, dtype=np.int64) for g in layer) for layer in self.groups)
        if len(widths) != len(groups):
            raise ValueError("one group list per hidden layer required")
        for d, (w, layer) in enumerate(zip(widths, groups)):
            if not layer or any(g.size == 0 for g in layer):
                raise ValueError(f"layer {d} has an empty group")
            flat = np.sort(np.concatenate(layer))
            if not np.array_equal(flat, np.arange(w)):
                raise ValueError(f"groups of layer {d} are not a partition of {w} neurons")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "groups", groups)

    @property
    def n_layers(self) -> int:
        return len(self.widths)

    @property
    def n_groups(self) -> int:
        return sum(len(layer) for layer in self.groups)

    def flat(self):
        """``(hidden layer, neuron indices)`` for every group in global order."""
        return [(d, g) for d, layer in enumerate(self.groups) for g in layer]

    def owner(self, net: DenseNet) -> np.ndarray:
        """Global group id owning each parameter, ``-1`` for Fisher-weighted ones.

        A group of hidden layer ``d`` owns the outgoing weights of its
        neurons, i.e. columns of layer ``d + 1``. First-layer weights and all
        biases are left to the Fisher weighting.
        """
        if tuple(net.sizes[1:-1]) != self.widths:
            raise ValueError(f"grouping widths {self.widths} do not match net {net.sizes}")
        owner = np.full(net.n_params, -1, dtype=np.int64)
        gid = 0
        for d, layer in enumerate(self.groups):
            l = d + 1
            block = owner[net.layer_slice(l)].reshape(net.sizes[l + 1], net.sizes[l] + 1)
            for g in layer:
                block[:, g] = gid
                gid += 1
        return owner


def _spherical_kmeans(v: np.ndarray, k: int, rng: np.random.Generator, iters: int = 50):
    n = v.shape[0]
    # seeding: first center random, the rest by largest cosine distance to the chosen set
    centers = [int(rng.integers(n))]
    dist = 1.0 - v @ v[centers[0]]
    for _ in range(1, k):
        dist = np.maximum(dist, 0.0)
        total = dist.sum()
        if total <= 0:
            choice = int(rng.choice(np.setdiff1d(np.arange(n), centers)))
        else:
            choice = int(rng.choice(n, p=dist / total))
        centers.append(choice)
        dist = np.minimum(dist, 1.0 - v @ v[choice])
    c = v[centers].copy()
    labels = np.full(n, -1)
    for _ in range(iters):
        sim = v @ c.T
        new = np.argmax(sim, axis=1)
        # refill empty clusters with the worst-fitting points of large clusters
        for j in range(k):
            if np.any(new == j):
                continue
            counts = np.bincount(new, minlength=k)
            fit = sim[np.arange(n), new]
            fit[counts[new] <= 1] = np.inf
            new[int(np.argmin(fit))] = j
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            m = v[labels == j].sum(axis=0)
            norm = np.linalg.norm(m)
            c[j] = m / norm if norm > 0 else v[labels == j][0]
    return labels


def modularize(net: DenseNet, k: int = 20, seed: int = 0) -> NeuronGrouping:
    """Cluster each hidden layer's neurons on their incoming weights (cosine distance)."""
    if k < 1:
        raise ValueError("need at least one group per layer")
    rng = np.random.default_rng(seed)
    widths, groups = [], []
    for l in range(net.n_layers - 1):
        width = net.sizes[l + 1]
        kd = k
        if width < k:
            log.warning("layer %d has %d neurons; clamping %d groups to %d", l, width, k, width)
            kd = width
        v = net.augmented(l).copy()
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        v = np.where(norm > 0, v / np.where(norm > 0, norm, 1.0), 0.0)
        labels = np.arange(width) if kd == width else _spherical_kmeans(v, kd, rng)
        layer = [np.flatnonzero(labels == j) for j in range(kd)]
        layer.sort(key=lambda g: g[0])
        widths.append(width)
        groups.append(layer)
    return NeuronGrouping(tuple(widths), tuple(groups))


# ---------------------------------------------------------------------------
# memories and metrics


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels outside [0, {n_classes})")
    return np.eye(n_classes)[labels]


def hidden_activations(net: DenseNet, x) -> list:
    fp = nn.forward(net, x)
    return [fp.hidden(l) for l in range(net.n_layers - 1)]


def group_covariances(net: DenseNet, grouping: NeuronGrouping, batch: DatasetBatch,
                      n_classes: int) -> list:
    y = one_hot(batch.response, n_classes)
    hidden = hidden_activations(net, batch.features)
    return [spd.joint_covariance_of(hidden[d][:, g], y) for d, g in grouping.flat()]


@dataclass
class TaskMemory:
    task_id: int
    theta: np.ndarray
    fisher: np.ndarray
    covariances: list
    buffer: DatasetBatch | None = None
    budget: int = 10

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=np.float64)
        self.fisher = np.array(self.fisher, dtype=np.float64)
        if self.theta.shape != self.fisher.shape:
            raise ValueError("snapshot and Fisher vector lengths differ")
        if np.any(self.fisher < 0):
            raise ValueError("Fisher information must be nonnegative")
        if self.buffer is not None and self.buffer.n > self.budget:
            raise ValueError(f"buffer of {self.buffer.n} exceeds budget {self.budget}")


@dataclass(frozen=True)
class ClMetrics:
    accuracy: np.ndarray
    la: float
    ra: float
    bt: float

    @classmethod
    def from_matrix(cls, a) -> "ClMetrics":
        a = np.array(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("accuracy matrix must be square")
        la = float(np.mean(np.diag(a)))
        ra = float(np.mean(a[-1]))
        a.setflags(write=False)
        return cls(a, la, ra, ra - la)

    def to_dict(self) -> dict:
        rows = [[None if math.isnan(v) else float(v) for v in row] for row in self.accuracy]
        return {"LA": self.la, "RA": self.ra, "BT": self.bt, "accuracy_matrix": rows}


# ---------------------------------------------------------------------------
# penalties


def group_conditional_divergence(memory: TaskMemory, current: JointCovariance | DatasetBatch,
                                 net: DenseNet | None = None,
                                 grouping: NeuronGrouping | None = None,
                                 group: int = 0, n_classes: int | None = None) -> float:
    """Symmetric conditional divergence between stored and current ``p(y | group)``.

    ``current`` is either a ready joint covariance or a labeled batch, in
    which case ``net``, ``grouping`` and ``n_classes`` are needed to embed it.
    """
    if not 0 <= group < len(memory.covariances):
        raise ValueError(f"no stored covariance for group {group}")
    stored = memory.covariances[group]
    if isinstance(current, DatasetBatch):
        if net is None or grouping is None or n_classes is None:
            raise ValueError("embedding a batch needs the net, grouping and class count")
        d, g = grouping.flat()[group]
        hidden = hidden_activations(net, current.features)[d][:, g]
        current = spd.joint_covariance_of(hidden, one_hot(current.response, n_classes))
    return max(spd.conditional_divergence(stored, current, symmetric=True), 0.0)


def softmax_neg(d: np.ndarray) -> np.ndarray:
    """``exp(-d) / sum(exp(-d))`` computed stably; ``+inf`` entries get 0."""
    d = np.asarray(d, dtype=np.float64)
    finite = np.isfinite(d)
    if not finite.any():
        raise ValueError("all divergences are infinite")
    e = np.where(finite, np.exp(-(np.where(finite, d, 0.0) - d[finite].min())), 0.0)
    return e / e.sum()


def group_weights(divergences, lam: float) -> np.ndarray:
    """Per-group penalty weights of one previous task; they sum to ``lam / 2``."""
    return 0.5 * lam * softmax_neg(divergences)


def rsp_penalties(memories: Sequence[TaskMemory], current: list, net: DenseNet,
                  grouping: NeuronGrouping, lam: float) -> list:
    """Per-parameter penalty weights, one vector per previous task.

    ``current`` holds the joint covariances of every group on the current
    data, in the grouping's global order.
    """
    if not memories:
        raise ValueError("rsp penalties need at least one previous task")
    owner = grouping.owner(net)
    fisher_part = owner < 0
    out = []
    for mem in memories:
        if len(mem.covariances) != grouping.n_groups:
            raise ValueError(f"task {mem.task_id} stores {len(mem.covariances)} covariances, "
                             f"grouping has {grouping.n_groups} groups")
        d = np.array([max(spd.conditional_divergence(s, c), 0.0)
                      for s, c in zip(mem.covariances, current)])
        w = group_weights(d, lam)
        r = np.where(fisher_part, 0.5 * lam * mem.fisher, w[np.maximum(owner, 0)])
        out.append(r)
    return out


def ewc_penalties(memories: Sequence[TaskMemory], lam: float) -> list:
    if not memories:
        raise ValueError("ewc penalties need at least one previous task")
    return [0.5 * lam * m.fisher for m in memories]


def quadratic_penalty(params: np.ndarray, memories: Sequence[TaskMemory], penalties: list):
    """``sum_A sum_i r_i (theta_i - theta*_i)^2`` and its gradient."""
    value = 0.0
    grad = np.zeros_like(params)
    for mem, r in zip(memories, penalties):
        if mem.theta.shape != params.shape or r.shape != params.shape:
            raise ValueError("snapshot or penalty length does not match the parameters")
        diff = params - mem.theta
        value += float(np.sum(r * diff * diff))
        grad += 2.0 * r * diff
    return value, grad


def regularized_loss(net: DenseNet, batch: DatasetBatch, memories: Sequence[TaskMemory],
                     penalties: list):
    """Softmax cross-entropy plus the quadratic penalty, with its flat gradient."""
    value, grad = nn.loss_and_gradient(net, batch, nn.LossSpec("softmax_cross_entropy"))
    if memories:
        pv, pg = quadratic_penalty(net.params, memories, penalties)
        value += pv
        grad = grad + pg
    return value, grad


def compute_fisher_diag(net: DenseNet, batch: DatasetBatch, chunk: int = 256) -> np.ndarray:
    """Mean squared per-sample cross-entropy gradient, parameter by parameter.

    The per-sample gradient of a dense layer is an outer product, so the
    squared entries are accumulated as ``(delta^2)^T (a^2)`` in chunks.
    """
    if batch.n == 0 or batch.response is None:
        raise ValueError("Fisher information needs a labeled, nonempty batch")
    labels = batch.response.astype(np.int64).ravel()
    total = np.zeros(net.n_params)
    for start in range(0, batch.n, chunk):
        x = batch.features[start:start + chunk]
        y = labels[start:start + chunk]
        fp = nn.forward(net, x)
        _, g = nn.softmax_cross_entropy(fp.output, y)
        g = g * x.shape[0]  # per-sample, not averaged
        for l in reversed(range(net.n_layers)):
            if net.activations[l] == "relu":
                g = g * (fp.pre[l] > 0.0)
            a_in = fp.inputs if l == 0 else fp.post[l - 1]
            block = total[net.layer_slice(l)].reshape(net.sizes[l + 1], net.sizes[l] + 1)
            block[:, :-1] += (g * g).T @ (a_in * a_in)
            block[:, -1] += (g * g).sum(axis=0)
            g = g @ net.weight(l)
    return total / batch.n


# ---------------------------------------------------------------------------
# task stream


@dataclass(frozen=True)
class ClConfig:
    lam: float = 10.0
    lr: float = 0.05
    batch_size: int = 10
    memory_budget: int = 10
    k_groups: int = 20
    hidden: tuple = (100, 100)
    covariance_source: Literal["task", "buffer"] = "task"
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.memory_budget < 1 or self.k_groups < 1:
            raise ValueError("batch size, memory budget and group count must be positive")
        if self.covariance_source not in ("task", "buffer"):
            raise ValueError(f"unknown covariance source {self.covariance_source!r}")


@dataclass
class ClResult:
    metrics: ClMetrics
    net: DenseNet
    grouping: NeuronGrouping | None
    memories: list = field(default_factory=list)


def accuracy(net: DenseNet, batch: DatasetBatch) -> float:
    pred = np.argmax(nn.forward(net, batch.features).output, axis=1)
    return float(np.mean(pred == batch.response.astype(np.int64).ravel()))


class _Reservoir:
    def __init__(self, budget: int, rng: np.random.Generator):
        self.budget = budget
        self.rng = rng
        self.idx: list = []
        self.seen = 0

    def offer(self, idx: np.ndarray):
        for i in idx:
            if len(self.idx) < self.budget:
                self.idx.append(int(i))
            else:
                j = int(self.rng.integers(self.seen + 1))
                if j < self.budget:
                    self.idx[j] = int(i)
            self.seen += 1


def _check_stream(tasks: Sequence[ClassificationTask]) -> tuple:
    if not tasks:
        raise ValueError("empty task stream")
    width = tasks[0].width
    classes = 0
    for t in tasks:
        if t.width != width or t.test.features.shape[1] != width:
            raise ValueError("tasks have inconsistent input widths")
        classes = max(classes, int(t.train.response.max()) + 1, int(t.test.response.max()) + 1)
    return width, classes


def run_task_stream(tasks: Sequence[ClassificationTask], method: Method,
                    config: ClConfig = ClConfig(), n_classes: int | None = None) -> ClResult:
    """Single-pass sequential training; returns the accuracy matrix and metrics."""
    if method not in ("sgd", "ewc", "rsp"):
        raise ValueError(f"unknown method {method!r}")
    width, classes = _check_stream(tasks)
    n_classes = n_classes or classes
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, order_rng, buffer_rng = (np.random.default_rng(s) for s in seeds)
    net = DenseNet.init([width, *config.hidden, n_classes], init_rng)
    opt = nn.Optimizer("sgd", config.lr)
    grouping = None
    memories: list = []
    acc = np.full((len(tasks), len(tasks)), np.nan)

    for t, task in enumerate(tasks):
        train = task.train
        order = order_rng.permutation(train.n)
        reservoir = _Reservoir(config.memory_budget, buffer_rng)
        last = None
        for start in range(0, train.n, config.batch_size):
            idx = order[start:start + config.batch_size]
            reservoir.offer(idx)
            _, grad = _ce_grad(net, train.features[idx], train.response[idx])
            if memories and method == "ewc":
                grad = grad + quadratic_penalty(net.params, memories,
                                                ewc_penalties(memories, config.lam))[1]
            elif memories and method == "rsp":
                # current statistics: this batch plus the current task's buffer
                pool = np.unique(np.concatenate([idx, np.asarray(reservoir.idx, dtype=np.int64)]))
                cur = group_covariances(net, grouping, train.subset(pool), n_classes)
                pen = rsp_penalties(memories, cur, net, grouping, config.lam)
                grad = grad + quadratic_penalty(net.params, memories, pen)[1]
            nn.update(net, grad, opt)
            last = idx

        if method == "rsp" and grouping is None:
            grouping = modularize(net, config.k_groups, seed=config.seed)
        buffer = train.subset(np.asarray(reservoir.idx, dtype=np.int64)) \
            if len(reservoir.idx) > 1 else None
        if config.covariance_source == "task" or buffer is None:
            stats = train
        else:
            pool = np.unique(np.concatenate([np.asarray(reservoir.idx), last]))
            stats = train.subset(pool)
        if method != "sgd":
            memories.append(TaskMemory(
                task_id=t,
                theta=net.params.copy(),
                fisher=compute_fisher_diag(net, stats),
                covariances=group_covariances(net, grouping, stats, n_classes)
                if method == "rsp" else [],
                buffer=buffer,
                budget=config.memory_budget,
            ))
        for j in range(t + 1):
            acc[t, j] = accuracy(net, tasks[j].test)
        log.info("%s task %d: %s", method, t, np.round(acc[t, :t + 1], 3))

    return ClResult(ClMetrics.from_matrix(acc), net, grouping, memories)


def _ce_grad(net: DenseNet, x, y):
    fp = nn.forward(net, x)
    value, g = nn.softmax_cross_entropy(fp.output, y)
    grad, _ = nn.backward(net, fp, g)
    return value, grad
