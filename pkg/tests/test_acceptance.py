"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into an ``acceptance criteria`` section of
the terminal summary. The desk-scale experiments (criteria 5 to 9) take
several minutes.
"""

import csv
import filecmp
import math
import os
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_spd, sym_fd_grad
from vncond import cli, datagen, mdd, nn, robustness, rsp, spd
from vncond.config import parse_config
from vncond.spd import DatasetBatch, SpdMatrix

MNIST_DIR = os.environ.get("VNCOND_MNIST_DIR", "")


def report(n: int, ok: bool, detail: str):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    assert ok, f"criterion {n}: {detail}"


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def fd_flat(f, p, h=1e-6):
    g = np.zeros_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        g[i] = (f(p + e) - f(p - e)) / (2 * h)
    return g


def test_criterion_01_divergence_identities():
    rng = np.random.default_rng(1)
    worst_dec = worst_tri = 0.0
    bad, broken = [], 0
    for t in range(1000):
        d = int(rng.integers(2, 9))
        x, y, z = (SpdMatrix(random_spd(rng, d)) for _ in range(3))
        j = spd.jeffery_divergence(x, y)
        if j < 0 or spd.jeffery_divergence(x, x) != 0.0:
            bad.append(("nonneg", t))
        if j != spd.jeffery_divergence(y, x):
            bad.append(("symmetry", t))
        dec = abs(j - 0.5 * (spd.vn_divergence(x, y) + spd.vn_divergence(y, x)))
        worst_dec = max(worst_dec, dec)
        slack = (spd.sqrt_jeffery_loss(x, y)
                 - spd.sqrt_jeffery_loss(x, z) - spd.sqrt_jeffery_loss(z, y))
        worst_tri = max(worst_tri, slack)
        broken += slack > 1e-9
    ok = not bad and worst_dec <= 1e-10 and worst_tri <= 1e-9
    report(1, ok, f"1000 triples, nonnegativity/symmetry violations={len(bad)}, "
                  f"max decomposition error={worst_dec:.1e}, triangle violations={broken} "
                  f"(max slack {worst_tri:.1e})")


def test_criterion_02_shared_feature_reduction():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(20, 200)), int(rng.integers(1, 6))
        x = rng.standard_normal((n, d)) @ rng.standard_normal((d, d))
        y1 = x @ rng.standard_normal(d) + rng.standard_normal(n)
        y2 = np.tanh(x[:, 0]) + 0.5 * rng.standard_normal(n)
        p1 = spd.estimate_joint_covariance(DatasetBatch(x, y1))
        p2 = spd.estimate_joint_covariance(DatasetBatch(x, y2))
        c = spd.conditional_divergence(p1, p2)
        worst = max(worst, abs(c - spd.jeffery_divergence(p1.matrix, p2.matrix)))
    report(2, worst <= 1e-9, f"50 constructions, max |cond - J| = {worst:.1e}")


def test_criterion_03_gradient_fidelity():
    rng = np.random.default_rng(3)
    worst_dk = worst_chain = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 9))
        x, y = random_spd(rng, d, cond=20.0), random_spd(rng, d, cond=20.0)
        gx, gy = spd.divergence_gradient(x, y)
        fx = sym_fd_grad(lambda m: spd.jeffery_divergence(m, y), x)
        fy = sym_fd_grad(lambda m: spd.jeffery_divergence(x, m), y)
        worst_dk = max(worst_dk, rel_err(gx, fx), rel_err(gy, fy))
    for _ in range(100):
        net = nn.DenseNet.init([3, 5, 1], rng)
        net.params += 0.1 * rng.standard_normal(net.n_params)
        xb = rng.standard_normal((12, 3))
        batch = DatasetBatch(xb, np.sin(xb[:, :1]) + 0.3 * rng.standard_normal((12, 1)))
        spec = nn.LossSpec("jvn_sqrt")

        def f(p):
            return nn.loss_and_gradient(nn.DenseNet(net.sizes, net.activations, p), batch, spec)[0]

        _, g = nn.loss_and_gradient(net, batch, spec)
        worst_chain = max(worst_chain, rel_err(g, fd_flat(f, net.params.copy())))
    worst_cf = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 9))
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        x = (q * rng.uniform(0.2, 5.0, d)) @ q.T
        y = (q * rng.uniform(0.2, 5.0, d)) @ q.T
        for a, b in zip(spd.divergence_gradient(x, y),
                        spd.divergence_gradient(x, y, "paper_closed_form")):
            worst_cf = max(worst_cf, np.abs(a - b).max())
    ok = worst_dk < 1e-4 and worst_chain < 1e-4 and worst_cf <= 1e-9
    report(3, ok, f"DK vs FD {worst_dk:.1e}, jvn chain vs FD {worst_chain:.1e}, "
                  f"closed form vs DK on commuting pairs {worst_cf:.1e}")


def test_criterion_04_convergence_trend():
    parts, ok = [], True
    for name, cov in (("I2", np.eye(2)), ("diag(1,5)", np.diag([1.0, 5.0]))):
        curve = spd.empirical_convergence_curve(cov, [100, 1000, 10000], trials=20, seed=4)
        vals = [v for _, v in curve]
        ok &= all(b <= a for a, b in zip(vals, vals[1:]))
        parts.append(f"{name}: " + ", ".join(f"{v:.2e}" for v in vals))
    report(4, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_05_robustness():
    cfg = robustness.RobustnessConfig()
    mean = robustness.summarize(robustness.run_robustness(cfg))
    top = max(cfg.lambdas)
    jt, mt = mean[(top, "jvn_sqrt")], mean[(top, "mse")]
    j0, m0 = mean[(0.0, "jvn_sqrt")], mean[(0.0, "mse")]
    ratio = max(j0, m0) / min(j0, m0)
    ok = jt < mt and ratio <= 1.25
    report(5, ok, f"lambda={top:g}: jvn {jt:.3f} vs mse {mt:.3f}; "
                  f"lambda=0: jvn {j0:.3f}, mse {m0:.3f}, ratio {ratio:.3f} (5 seeds)")


@pytest.mark.slow
def test_criterion_06_synthetic_mdd_weights(tmp_path):
    cfg = parse_config("seed = 0\n[mdd]\nn_per_domain = 2000\nn_seeds = 3\nepochs = 30\n")
    cli.run_mdd_synthetic(cfg, tmp_path)
    near, far, rows_ok = [], [], True
    for seed in range(3):
        table = cli_rows(tmp_path / f"weights_seed{seed}.csv")
        for row in table:
            t = int(row[0]) - 1
            w = {s: float(v) for s, v in enumerate(row[1:]) if v != ""}
            rows_ok &= math.fsum(w.values()) == 1.0
            near += [v for s, v in w.items() if abs(s - t) == 1]
            far += [v for s, v in w.items() if abs(s - t) >= 3]
    for row in cli_rows(tmp_path / "weights.csv"):
        rows_ok &= math.fsum(float(v) for v in row[1:] if v != "") == 1.0
    ok = rows_ok and np.mean(near) > np.mean(far)
    report(6, ok, f"near-neighbour mean weight {np.mean(near):.3f} vs distance>=3 "
                  f"{np.mean(far):.3f}; all rows sum to 1 exactly: {rows_ok}")


def cli_rows(path):
    lines = Path(path).read_text().splitlines()
    return list(csv.reader(lines[2:]))


def test_criterion_07_mdd_sanity():
    ratios, bitwise = [], True
    for seed in range(3):
        for loss in ("jvn_sqrt", "rmse"):
            src = datagen.friedman_domains(1000, seed=seed)[0]
            test = datagen.friedman_domains(1000, seed=seed + 100)[0]
            p = mdd.build_problem([src], src, seed=seed)
            cfg = mdd.MddConfig(epochs=30, batch_size=500, loss=loss, seed=seed)
            a, b = mdd.mdd_train(p, cfg), mdd.train_source_only(p, cfg)
            ma = mdd.evaluate_target(a.extractor, a.predictor, test, mdd.source_offset(a, [src]))
            mb = mdd.evaluate_target(b.extractor, b.predictor, test, mdd.source_offset(b, [src]))
            ratios.append(ma / mb)
            zero = mdd.MddConfig(epochs=3, batch_size=100, loss=loss, seed=seed, disc_weight=0.0)
            c, s = mdd.mdd_train(p, zero), mdd.train_source_only(p, zero)
            bitwise &= all(u.params.tobytes() == v.params.tobytes()
                           for u, v in ((c.extractor, s.extractor), (c.predictor, s.predictor)))
    worst = max(abs(r - 1.0) for r in ratios)
    report(7, worst <= 0.10 and bitwise,
           f"K=1 MAE ratio to baseline in [{min(ratios):.3f}, {max(ratios):.3f}]; "
           f"zero coefficient bitwise equal: {bitwise}")


def toy_stream(seed):
    base = datagen.BlobTask(separation=8, seed=seed).task(1000, 500, seed)
    return datagen.permuted_task_stream(base, 5, seed)


@pytest.fixture(scope="module")
def cl_runs():
    """RSP runs for K in {5,10,15,20} and an SGD run per seed on the toy stream."""
    out = {}
    for seed in range(3):
        tasks = toy_stream(seed)
        out[seed, "sgd"] = rsp.run_task_stream(tasks, "sgd", rsp.ClConfig(seed=seed))
        for k in (5, 10, 15, 20):
            out[seed, k] = rsp.run_task_stream(tasks, "rsp", rsp.ClConfig(k_groups=k, seed=seed))
    return out


@pytest.mark.slow
def test_criterion_08_cl_forgetting(cl_runs):
    parts, ok = [], True
    for seed in range(3):
        s, r = cl_runs[seed, "sgd"].metrics, cl_runs[seed, 20].metrics
        ok &= r.ra > s.ra and r.bt >= s.bt
        parts.append(f"seed {seed}: RA {r.ra:.3f}/{s.ra:.3f} BT {r.bt:.3f}/{s.bt:.3f}")
    tasks = toy_stream(0)
    zero = [rsp.run_task_stream(tasks, m, rsp.ClConfig(lam=0.0)).net.params.tobytes()
            for m in ("sgd", "ewc", "rsp")]
    bitwise = zero[0] == zero[1] == zero[2]
    report(8, ok and bitwise, "rsp/sgd " + "; ".join(parts) + f"; lambda=0 bitwise: {bitwise}")


@pytest.mark.slow
@pytest.mark.skipif(not MNIST_DIR, reason="set VNCOND_MNIST_DIR to the MNIST IDX files")
def test_criterion_08_mnist_permuted():
    root = Path(MNIST_DIR)
    train = datagen.load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    test = datagen.load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")
    wins = 0
    for seed in range(3):
        base = datagen.ClassificationTask(train.subset(np.arange(1000)),
                                          test.subset(np.arange(1000)), None, "mnist")
        tasks = datagen.permuted_task_stream(base, 10, seed)
        e = rsp.run_task_stream(tasks, "ewc", rsp.ClConfig(seed=seed), n_classes=10).metrics
        r = rsp.run_task_stream(tasks, "rsp", rsp.ClConfig(seed=seed), n_classes=10).metrics
        wins += r.ra > e.ra
    report(8, wins >= 2, f"mnistP: RA(rsp) > RA(ewc) in {wins} of 3 seeds")


@pytest.mark.slow
def test_criterion_09_rsp_structure(cl_runs):
    lam = rsp.ClConfig().lam
    worst_mass, partitions = 0.0, True
    for (seed, key), res in cl_runs.items():
        if key == "sgd":
            continue
        g = res.grouping
        for d, w in enumerate(g.widths):
            flat = np.sort(np.concatenate(g.groups[d]))
            partitions &= np.array_equal(flat, np.arange(w))
        task = toy_stream(seed)[-1].train
        n_classes = res.net.out_features
        for mem in res.memories:
            div = [rsp.group_conditional_divergence(mem, task, res.net, g, i, n_classes)
                   for i in range(g.n_groups)]
            worst_mass = max(worst_mass, abs(rsp.group_weights(div, lam).sum() - lam / 2))
    ra = {k: np.mean([cl_runs[s, k].metrics.ra for s in range(3)]) for k in (5, 10, 15, 20)}
    spread = 100 * (max(ra.values()) - min(ra.values()))
    ok = worst_mass <= 1e-10 and partitions and spread <= 2.0
    report(9, ok, f"max |mass - lambda/2| = {worst_mass:.1e}; partitions exact: {partitions}; "
                  "seed-averaged RA by K " + ", ".join(f"{k}:{v:.3f}" for k, v in ra.items())
                  + f" (spread {spread:.2f} points)")


SMALL = """\
seed = 5
[mdd]
n_per_domain = 100
epochs = 2
batch_size = 50
hidden = 8
features = 4
baseline = yes
[robustness]
lambdas = 0, 8
n_seeds = 2
n_train = 100
n_test = 100
epochs = 2
hidden = 8
[cl]
hidden = 8, 8
k_groups = 3
[datagen]
n = 30
noise_scale = 1
"""


def test_criterion_10_cli_determinism(tmp_path, capsys):
    (tmp_path / "m.txt").write_text("num_tasks = 3\nn_train = 80\nn_test = 40\nwidth = 10\n")
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL.replace("[cl]\n", f"[cl]\nmanifest = {tmp_path / 'm.txt'}\n"))
    datagen.write_csv(tmp_path / "a.csv", datagen.friedman_domains(40, seed=1)[0])
    datagen.write_csv(tmp_path / "b.csv", datagen.friedman_domains(40, seed=1)[3])
    (tmp_path / "csv.ini").write_text(
        "[mdd]\nepochs = 2\nbatch_size = 20\nhidden = 8\nfeatures = 4\n"
        f"sources = {tmp_path / 'a.csv'}\ntarget = {tmp_path / 'b.csv'}\n")
    commands = {
        "mdd synthetic": ["mdd", "synthetic", "--config", str(cfg)],
        "mdd csv": ["mdd", "csv", "--config", str(tmp_path / "csv.ini")],
        "robustness": ["robustness", "--config", str(cfg)],
        "cl run": ["cl", "run", "--config", str(cfg)],
        "datagen": ["datagen", "--config", str(cfg)],
    }
    diffs = []
    for name, argv in commands.items():
        dirs = []
        for rep in range(2):
            out = tmp_path / f"{name.replace(' ', '_')}_{rep}"
            assert cli.main([*argv, "--out", str(out)]) == 0, name
            dirs.append(out)
        cmp = filecmp.dircmp(dirs[0], dirs[1])
        names = sorted(p.name for p in dirs[0].iterdir())
        _, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], names, shallow=False)
        if mismatch or errors or cmp.left_only or cmp.right_only:
            diffs.append(name)
    outs = []
    for _ in range(2):
        assert cli.main(["divergence", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 0
        outs.append(capsys.readouterr().out)
    if outs[0] != outs[1]:
        diffs.append("divergence")
    report(10, not diffs, f"6 commands repeated, differing outputs: {diffs or 'none'}")
