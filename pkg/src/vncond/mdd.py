"""Multi-source domain adaptation with a matrix-based discrepancy distance.

A feature extractor ``f``, a predictor ``h`` and an adversarial copy
``h_adv`` play a min-max game: ``h`` fits the weighted sources, ``h_adv``
maximizes the gap between target and weighted-source disagreement of the
two heads, ``f`` minimizes risk plus that gap, and the source weights
descend the gap and are projected back onto the simplex.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from vncond import nn
from vncond.nn import DenseNet, ForwardPass, Optimizer
from vncond.spd import DatasetBatch, GradientMode, NumericalFailure

log = logging.getLogger(__name__)

RiskKind = Literal["jvn_sqrt", "rmse"]


# ---------------------------------------------------------------------------
# simplex weights


@dataclass(frozen=True)
class SourceWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64).ravel()
        if w.size == 0:
            raise ValueError("need at least one source weight")
        if np.any(w < 0) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError(f"weights are not on the simplex: {w}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, k: int) -> "SourceWeights":
        return cls(np.full(k, 1.0 / k))

    def __len__(self):
        return self.w.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.w, dtype=dtype)


def _exact_unit_sum(w: np.ndarray) -> np.ndarray:
    """Nudge the largest entry by ulps until the exactly rounded sum is 1."""
    w = w.copy()
    i = int(np.argmax(w))
    w[i] += 1.0 - math.fsum(w)
    for _ in range(64):
        s = math.fsum(w)
        if s == 1.0:
            break
        w[i] = np.nextafter(w[i], -np.inf if s > 1.0 else np.inf)
    return w


def project_simplex(v) -> SourceWeights:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ValueError(f"cannot project {v} onto the simplex")
    if np.all(v >= 0) and math.fsum(v) == 1.0:
        return SourceWeights(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return SourceWeights(_exact_unit_sum(np.maximum(v - tau, 0.0)))


def normalize_l1(v) -> SourceWeights:
    """Plain ``w / ||w||_1`` renormalization; negative entries are clipped first."""
    v = np.maximum(np.asarray(v, dtype=np.float64).ravel(), 0.0)
    total = v.sum()
    if total <= 0:
        return SourceWeights.uniform(v.size)
    return SourceWeights(_exact_unit_sum(v / total))


# ---------------------------------------------------------------------------
# problem definition


@dataclass
class MsdaProblem:
    sources: list
    target: DatasetBatch
    extractor: DenseNet
    predictor: DenseNet
    adversary: DenseNet

    def __post_init__(self):
        if not self.sources:
            raise ValueError("need at least one source domain")
        width = self.target.features.shape[1]
        for i, s in enumerate(self.sources):
            if s.response is None:
                raise ValueError(f"source {i} is unlabeled")
            if s.features.shape[1] != width:
                raise ValueError(f"source {i} has width {s.features.shape[1]}, target {width}")
        if self.extractor.in_features != width:
            raise ValueError("extractor input width does not match the data")
        if (self.predictor.sizes != self.adversary.sizes
                or self.predictor.activations != self.adversary.activations):
            raise ValueError("predictor and adversary must share an architecture")
        if self.predictor.in_features != self.extractor.out_features:
            raise ValueError("predictor input width must equal the extractor output width")

    @property
    def k(self) -> int:
        return len(self.sources)

    def copy(self) -> "MsdaProblem":
        return MsdaProblem(list(self.sources), self.target, self.extractor.copy(),
                           self.predictor.copy(), self.adversary.copy())


def build_problem(sources: Sequence[DatasetBatch], target: DatasetBatch, seed: int,
                  hidden: Sequence[int] = (64,), features: int = 16,
                  head_hidden: Sequence[int] = (), dropout: float = 0.0,
                  adversary_noise: float = 1e-2) -> MsdaProblem:
    """Fresh networks; the adversary starts as a Gaussian-perturbed copy of the predictor."""
    rng = np.random.default_rng(seed)
    width = target.features.shape[1]
    r = sources[0].response.shape[1]
    f = DenseNet.init([width, *hidden, features], rng, output="relu", dropout=dropout)
    h = DenseNet.init([features, *head_hidden, r], rng, dropout=dropout)
    h_adv = h.copy()
    h_adv.params += adversary_noise * rng.standard_normal(h.n_params)
    return MsdaProblem(list(sources), target, f, h, h_adv)


# ---------------------------------------------------------------------------
# objective terms


def _risk_term(kind: RiskKind, x, pred, y, mode: GradientMode):
    if kind == "jvn_sqrt":
        value, _, grad, _ = nn.sqrt_jeffery_pair(x, pred, y, mode)
        return value, grad
    if kind == "rmse":
        return nn.rmse_loss(pred, y)
    raise ValueError(f"unknown risk kind {kind!r}")


def weighted_source_risk(h: DenseNet, f: DenseNet, sources: Sequence[DatasetBatch], w,
                         loss: RiskKind = "jvn_sqrt",
                         mode: GradientMode = "daleckii_krein") -> float:
    """``sum_i w_i loss_i``; the jvn loss pairs raw inputs with predictions."""
    w = np.asarray(SourceWeights(w))
    if len(sources) != w.size:
        raise ValueError(f"{len(sources)} sources but {w.size} weights")
    total = 0.0
    for wi, s in zip(w, sources):
        if s.response is None:
            raise ValueError("weighted source risk needs labeled sources")
        pred = nn.stack_forward([f, h], s.features)[-1].output
        total += wi * _risk_term(loss, s.features, pred, s.response, mode)[0]
    return float(total)


def disagreement(h: DenseNet, h_adv: DenseNet, f: DenseNet, x) -> float:
    """``sqrt(J)`` between covariances of (f(x), h(f(x))) and (f(x), h_adv(f(x)))."""
    feats = nn.forward(f, x).output
    return nn.sqrt_jeffery_pair(feats, nn.forward(h, feats).output,
                                nn.forward(h_adv, feats).output)[0]


def m_disc(h: DenseNet, h_adv: DenseNet, f: DenseNet, target: DatasetBatch,
           sources: Sequence[DatasetBatch], w) -> float:
    w = np.asarray(SourceWeights(w))
    if len(sources) != w.size:
        raise ValueError(f"{len(sources)} sources but {w.size} weights")
    t = disagreement(h, h_adv, f, target.features)
    s = sum(wi * disagreement(h, h_adv, f, b.features) for wi, b in zip(w, sources))
    return abs(t - s)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class MddConfig:
    epochs: int = 30
    batch_size: int = 300
    lr: float = 1e-3
    weight_lr: float = 1e-2
    loss: RiskKind = "jvn_sqrt"
    disc_weight: float = 1.0
    grad_mode: GradientMode = "daleckii_krein"
    simplex: Literal["euclidean", "l1"] = "euclidean"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.lr <= 0 or self.weight_lr < 0:
            raise ValueError("learning rates must be positive")
        if self.loss not in ("jvn_sqrt", "rmse"):
            raise ValueError(f"unknown risk loss {self.loss!r}")
        if self.simplex not in ("euclidean", "l1"):
            raise ValueError(f"unknown simplex handling {self.simplex!r}")


@dataclass
class EpochRecord:
    epoch: int
    weighted_risk: float
    m_disc: float
    weights: np.ndarray


@dataclass
class MddResult:
    extractor: DenseNet
    predictor: DenseNet
    adversary: DenseNet
    weights: SourceWeights
    trace: list = field(default_factory=list)

    def regressor(self, offset: float = 0.0) -> nn.Regressor:
        return nn.Regressor([self.extractor, self.predictor], offset)


def _epoch_batches(sizes: Sequence[int], batch_size: int, rng: np.random.Generator):
    """Synchronized mini-batch indices per domain; shorter domains cycle."""
    perms = [rng.permutation(n) for n in sizes]
    steps = max(1, math.ceil(max(sizes) / batch_size))
    for k in range(steps):
        yield [p[(k * batch_size + np.arange(min(batch_size, len(p)))) % len(p)]
               for p in perms]


def _train(problem: MsdaProblem, config: MddConfig, adversarial: bool) -> MddResult:
    prob = problem.copy()
    f, h, h_adv = prob.extractor, prob.predictor, prob.adversary
    k = prob.k
    weights = SourceWeights.uniform(k)
    opt_f = Optimizer("adam", config.lr)
    opt_h = Optimizer("adam", config.lr)
    opt_adv = Optimizer("adam", config.lr)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    batch_rng, drop_rng, adv_rng = (np.random.default_rng(s) for s in seeds)
    c = config.disc_weight
    mode = config.grad_mode
    sizes = [s.n for s in prob.sources] + [prob.target.n]
    trace = []

    for epoch in range(config.epochs):
        risks, discs = [], []
        for idx in _epoch_batches(sizes, config.batch_size, batch_rng):
            w = np.asarray(weights)
            src = [s.subset(i) for s, i in zip(prob.sources, idx[:k])]
            f_pass = [nn.forward(f, b.features, train=True, rng=drop_rng) for b in src]
            h_pass = [nn.forward(h, fp.output, train=True, rng=drop_rng) for fp in f_pass]

            g_h = np.zeros(h.n_params)
            g_in = []
            risk = 0.0
            for j, b in enumerate(src):
                e, de = _risk_term(config.loss, b.features, h_pass[j].output, b.response, mode)
                if not np.isfinite(e):
                    raise NumericalFailure(f"non-finite source risk at epoch {epoch}")
                risk += w[j] * e
                gp, gi = nn.backward(h, h_pass[j], w[j] * de)
                g_h += gp
                g_in.append(gi)

            if adversarial:
                tgt = prob.target.subset(idx[k])
                ft = nn.forward(f, tgt.features, train=True, rng=adv_rng)
                ht = nn.forward(h, ft.output, train=True, rng=adv_rng)
                at = nn.forward(h_adv, ft.output, train=True, rng=adv_rng)
                a_pass = [nn.forward(h_adv, fp.output, train=True, rng=adv_rng) for fp in f_pass]
                t_val, dft, dht, dat = nn.sqrt_jeffery_pair(ft.output, ht.output, at.output, mode)
                s_vals, s_grads = [], []
                for j in range(k):
                    s_j = nn.sqrt_jeffery_pair(f_pass[j].output, h_pass[j].output,
                                               a_pass[j].output, mode)
                    s_vals.append(s_j[0])
                    s_grads.append(s_j[1:])
                gap = t_val - float(np.dot(w, s_vals))
                disc = abs(gap)
                if not np.isfinite(disc):
                    raise NumericalFailure(f"non-finite M-disc at epoch {epoch}")
                sign = float(np.sign(gap)) * c

                # d M / d (target / source activations), scaled by the coefficient
                g_adv = nn.backward(h_adv, at, sign * dat)[0]
                _, gi_ht = nn.backward(h, ht, sign * dht)
                _, gi_at = nn.backward(h_adv, at, sign * dat)
                g_f_target = nn.backward(f, ft, sign * dft + gi_ht + gi_at)[0]
                for j in range(k):
                    dfj, dhj, daj = s_grads[j]
                    scale = -sign * w[j]
                    gp_adv, gi_a = nn.backward(h_adv, a_pass[j], scale * daj)
                    g_adv += gp_adv
                    _, gi_h = nn.backward(h, h_pass[j], scale * dhj)
                    g_in[j] = g_in[j] + (scale * dfj + gi_h + gi_a)
                discs.append(disc)

            g_f = np.zeros(f.n_params)
            for j in range(k):
                g_f += nn.backward(f, f_pass[j], g_in[j])[0]

            # Algorithm order: h, then h_adv, then f, then w
            nn.update(h, g_h, opt_h)
            if adversarial:
                nn.update(h_adv, -g_adv, opt_adv)
                g_f = g_f + g_f_target
            nn.update(f, g_f, opt_f)
            if adversarial and c != 0.0 and config.weight_lr > 0:
                grad_w = -sign * np.asarray(s_vals)
                v = w - config.weight_lr * grad_w
                weights = project_simplex(v) if config.simplex == "euclidean" else normalize_l1(v)
            risks.append(risk)

        record = EpochRecord(epoch + 1, float(np.mean(risks)),
                             float(np.mean(discs)) if discs else 0.0, np.asarray(weights).copy())
        trace.append(record)
        log.debug("epoch %d risk %.4f m-disc %.4f w %s", record.epoch, record.weighted_risk,
                  record.m_disc, np.round(record.weights, 3))

    return MddResult(f, h, h_adv, weights, trace)


def mdd_train(problem: MsdaProblem, config: MddConfig) -> MddResult:
    """Adversarial training with learned source weights; see module docstring."""
    return _train(problem, config, adversarial=True)


def train_source_only(problem: MsdaProblem, config: MddConfig) -> MddResult:
    """Uniformly weighted source training with the same batching and seeds."""
    return _train(problem, config, adversarial=False)


def source_offset(result: MddResult, sources: Sequence[DatasetBatch]) -> float:
    """Weighted mean training residual of the learned predictor."""
    model = result.regressor()
    w = np.asarray(result.weights)
    return float(sum(wi * nn.bias_offset(model.raw(s.features), s.response)
                     for wi, s in zip(w, sources)))


def evaluate_target(f: DenseNet, h: DenseNet, batch: DatasetBatch, offset: float = 0.0) -> float:
    """Mean absolute error of ``h(f(x)) + offset`` on labeled target data."""
    if batch.response is None:
        raise ValueError("target evaluation needs labels")
    pred = nn.stack_forward([f, h], batch.features)[-1].output + offset
    return float(np.mean(np.abs(pred - batch.response)))
