"""Robustness of the square-root Jeffery loss against MSE under mixture noise.

Friedman regression with uniform features; training responses are
corrupted by a scaled Gaussian mixture, test responses are clean. Both
models get a post-hoc mean offset estimated on the noisy training data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vncond import nn
from vncond.datagen import MOG_2DPLANES, MoGNoiseSpec, friedman_response, inject_mog_noise
from vncond.nn import DenseNet, LossSpec, Optimizer
from vncond.spd import DatasetBatch


@dataclass(frozen=True)
class RobustnessConfig:
    lambdas: tuple = (0.0, 4.0, 8.0)
    losses: tuple = ("jvn_sqrt", "mse")
    seeds: tuple = (0, 1, 2, 3, 4)
    n_train: int = 2000
    n_test: int = 2000
    epochs: int = 80
    batch_size: int = 8
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    noise: MoGNoiseSpec = MOG_2DPLANES

    def __post_init__(self):
        if not self.lambdas:
            raise ValueError("the noise grid must not be empty")
        if any(l < 0 for l in self.lambdas):
            raise ValueError("noise scales must be nonnegative")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for k in self.losses:
            if k not in ("jvn_sqrt", "mse", "rmse"):
                raise ValueError(f"unsupported loss {k!r}")
        if self.batch_size < 2 or self.n_train < 2 or self.n_test < 2:
            raise ValueError("batches and datasets need at least 2 samples")


def friedman_uniform(n: int, seed: int, noise: bool = True) -> DatasetBatch:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (n, 12))
    return DatasetBatch(x, friedman_response(x, noise=noise, rng=rng))


def clean_test_rmse(kind: str, lam: float, seed: int, config: RobustnessConfig) -> float:
    train = friedman_uniform(config.n_train, seed)
    train = inject_mog_noise(train, config.noise.with_scale(lam), seed + 7)
    test = friedman_uniform(config.n_test, seed + 999, noise=False)
    rng = np.random.default_rng(seed)
    net = DenseNet.init([12, *config.hidden, 1], rng)
    opt = Optimizer("adam", config.lr)
    spec = LossSpec(kind)
    for _ in range(config.epochs):
        perm = rng.permutation(train.n)
        for s in range(0, train.n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            if idx.size < 2:
                continue
            _, g = nn.loss_and_gradient(net, train.subset(idx), spec)
            nn.update(net, g, opt)
    model = nn.Regressor([net])
    nn.apply_bias_offset(model, train)
    err = model.predict(test.features) - test.response
    return float(np.sqrt(np.mean(err ** 2)))


def run_robustness(config: RobustnessConfig = RobustnessConfig()) -> list:
    """Rows of ``(lambda, loss, clean-test RMSE, seed)``."""
    rows = []
    for lam in config.lambdas:
        for kind in config.losses:
            for seed in config.seeds:
                rows.append((float(lam), kind, clean_test_rmse(kind, lam, seed, config), int(seed)))
    return rows


def summarize(rows) -> dict:
    """Mean error per ``(lambda, loss)``."""
    acc: dict = {}
    for lam, kind, err, _ in rows:
        acc.setdefault((lam, kind), []).append(err)
    return {key: float(np.mean(v)) for key, v in acc.items()}
