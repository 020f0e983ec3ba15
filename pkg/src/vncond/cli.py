"""Command-line harness: ``vncond <command> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from vncond import datagen, mdd, robustness, rsp, spd
from vncond.config import ConfigError, ExperimentConfig, load_config, read_manifest

log = logging.getLogger("vncond")

MIXTURES = {
    "2dplanes": datagen.MOG_2DPLANES,
    "bank8fm": datagen.MOG_BANK8FM,
    "calhousing": datagen.MOG_CALHOUSING,
    "puma8nh": datagen.MOG_PUMA8NH,
}


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_table(path: Path, header, rows, cfg: ExperimentConfig):
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.hash()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _mixture(name: str):
    if name not in MIXTURES:
        raise ConfigError(f"unknown mixture {name!r}; choose from {sorted(MIXTURES)}")
    return MIXTURES[name]


def _seeds(cfg: ExperimentConfig, n: int) -> list:
    if n < 1:
        raise ConfigError("n_seeds must be at least 1")
    return [cfg.seed + i for i in range(n)]


# ---------------------------------------------------------------------------
# divergence


def cmd_divergence(cfg: ExperimentConfig, args) -> int:
    sec = cfg.divergence
    file_a = args.file_a or sec.file_a
    file_b = args.file_b or sec.file_b
    response = args.response or sec.response
    if not file_a or not file_b:
        raise ConfigError("divergence needs two CSV files")
    for f in (file_a, file_b):
        if not Path(f).is_file():
            raise FileNotFoundError(f"no such file: {f}")
    ha, hb = datagen.csv_header(file_a), datagen.csv_header(file_b)
    if ha != hb:
        raise ConfigError(f"schema mismatch: {ha} vs {hb}")
    a = datagen.load_csv(file_a, response)
    b = datagen.load_csv(file_b, response)
    ja, jb = spd.estimate_joint_covariance(a), spd.estimate_joint_covariance(b)
    out = {
        "vn_ab": spd.vn_divergence(ja.matrix, jb.matrix),
        "vn_ba": spd.vn_divergence(jb.matrix, ja.matrix),
        "jeffery": spd.jeffery_divergence(ja.matrix, jb.matrix),
        "conditional": spd.conditional_divergence(ja, jb, symmetric=True),
        "config_hash": cfg.hash(),
    }
    sys.stdout.write(json.dumps(out, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------------------
# mdd


def _mdd_config(sec, seed: int) -> mdd.MddConfig:
    return mdd.MddConfig(epochs=sec.epochs, batch_size=sec.batch_size, lr=sec.lr,
                         weight_lr=sec.weight_lr, loss=sec.loss, disc_weight=sec.disc_weight,
                         grad_mode=sec.grad_mode, simplex=sec.simplex, seed=seed)


def _build(sec, sources, target, seed):
    return mdd.build_problem(sources, target, seed=seed, hidden=sec.hidden, features=sec.features,
                             head_hidden=sec.head_hidden, dropout=sec.dropout)


def _trace_rows(result: mdd.MddResult):
    return [(r.epoch, r.weighted_risk, r.m_disc, *r.weights) for r in result.trace]


def _trace_header(k: int):
    return ["epoch", "weighted_risk", "m_disc", *[f"w_{j + 1}" for j in range(k)]]


def run_mdd_synthetic(cfg: ExperimentConfig, out: Path) -> np.ndarray:
    """Train on every target choice; returns the seed-averaged weight matrix."""
    sec = cfg.mdd
    seeds = _seeds(cfg, sec.n_seeds)
    n_dom = datagen.N_FRIEDMAN_DOMAINS
    mats, mae_rows = [], []
    for seed in seeds:
        doms = datagen.friedman_domains(sec.n_per_domain, seed=seed)
        w_mat = np.full((n_dom, n_dom), np.nan)
        for t in range(n_dom):
            src_idx = [i for i in range(n_dom) if i != t]
            sources = [doms[i] for i in src_idx]
            target = spd.DatasetBatch(doms[t].features)
            problem = _build(sec, sources, target, seed)
            mcfg = _mdd_config(sec, seed)
            result = mdd.mdd_train(problem, mcfg)
            w_mat[t, src_idx] = np.asarray(result.weights)
            offset = mdd.source_offset(result, sources)
            row = [t + 1, seed, mdd.evaluate_target(result.extractor, result.predictor, doms[t], offset)]
            if sec.baseline:
                base = mdd.train_source_only(problem, mcfg)
                row.append(mdd.evaluate_target(base.extractor, base.predictor, doms[t],
                                               mdd.source_offset(base, sources)))
            mae_rows.append(row)
            write_table(out / f"trace_target{t + 1}_seed{seed}.csv",
                        ["epoch", "weighted_risk", "m_disc",
                         *[f"w_{i + 1}" for i in src_idx]], _trace_rows(result), cfg)
        mats.append(w_mat)
        write_table(out / f"weights_seed{seed}.csv", *_heatmap(w_mat), cfg)
    mean = np.mean(mats, axis=0)
    for t in range(n_dom):
        off = [i for i in range(n_dom) if i != t]
        mean[t, off] = np.asarray(mdd.normalize_l1(mean[t, off]))
    write_table(out / "weights.csv", *_heatmap(mean), cfg)
    header = ["target", "seed", "mae_mdd"] + (["mae_source_only"] if sec.baseline else [])
    write_table(out / "mae.csv", header, mae_rows, cfg)
    return mean


def _heatmap(w_mat: np.ndarray):
    n = w_mat.shape[0]
    header = ["target", *[f"source_{j + 1}" for j in range(n)]]
    return header, [[i + 1, *w_mat[i]] for i in range(n)]


def cmd_mdd_synthetic(cfg: ExperimentConfig, args) -> int:
    run_mdd_synthetic(cfg, Path(args.out))
    return 0


def cmd_mdd_csv(cfg: ExperimentConfig, args) -> int:
    sec = cfg.mdd
    if not sec.sources or not sec.target:
        raise ConfigError("[mdd] sources and target are required for csv mode")
    for f in (*sec.sources, sec.target):
        if not Path(f).is_file():
            raise FileNotFoundError(f"no such file: {f}")
    sources = [datagen.load_csv(f, sec.response) for f in sec.sources]
    has_labels = sec.response in datagen.csv_header(sec.target)
    target = datagen.load_csv(sec.target, sec.response if has_labels else None)
    out = Path(args.out)
    seed = cfg.seed
    result = mdd.mdd_train(_build(sec, sources, spd.DatasetBatch(target.features), seed),
                           _mdd_config(sec, seed))
    k = len(sources)
    write_table(out / "trace.csv", _trace_header(k), _trace_rows(result), cfg)
    write_table(out / "weights.csv", ["source", "path", "weight"],
                [(j + 1, p, w) for j, (p, w) in enumerate(zip(sec.sources, result.weights.w))], cfg)
    if has_labels:
        offset = mdd.source_offset(result, sources)
        mae = mdd.evaluate_target(result.extractor, result.predictor, target, offset)
        write_table(out / "mae.csv", ["seed", "mae_mdd"], [(seed, mae)], cfg)
    return 0


# ---------------------------------------------------------------------------
# robustness


def cmd_robustness(cfg: ExperimentConfig, args) -> int:
    sec = cfg.robustness
    rcfg = robustness.RobustnessConfig(
        lambdas=sec.lambdas, losses=sec.losses, seeds=tuple(_seeds(cfg, sec.n_seeds)),
        n_train=sec.n_train, n_test=sec.n_test, epochs=sec.epochs, batch_size=sec.batch_size,
        lr=sec.lr, hidden=sec.hidden, noise=_mixture(sec.mixture))
    rows = robustness.run_robustness(rcfg)
    write_table(Path(args.out) / "robustness.csv", ["lambda", "loss", "clean_test_rmse", "seed"],
                rows, cfg)
    return 0


# ---------------------------------------------------------------------------
# continual learning


def build_stream(manifest: dict, seed: int, base_dir: Path = Path(".")) -> list:
    """Task list from a parsed manifest (see README for the keys)."""
    known = {"generator", "num_tasks", "n_train", "n_test", "separation", "width",
             "n_classes", "stream_seed", "train_images", "train_labels", "test_images",
             "test_labels"}
    unknown = set(manifest) - known
    if unknown:
        raise ConfigError(f"unknown manifest keys {sorted(unknown)}")
    try:
        gen = manifest.get("generator", "blobs")
        num_tasks = int(manifest.get("num_tasks", 5))
        stream_seed = int(manifest.get("stream_seed", seed))
        if gen == "blobs":
            blobs = datagen.BlobTask(width=int(manifest.get("width", 784)),
                                     n_classes=int(manifest.get("n_classes", 10)),
                                     separation=float(manifest.get("separation", 8.0)),
                                     seed=stream_seed)
            base = blobs.task(int(manifest.get("n_train", 1000)),
                              int(manifest.get("n_test", 500)), stream_seed)
        elif gen == "idx":
            paths = {k: base_dir / manifest[k] for k in
                     ("train_images", "train_labels", "test_images", "test_labels")}
            train = datagen.load_idx(paths["train_images"], paths["train_labels"])
            test = datagen.load_idx(paths["test_images"], paths["test_labels"])
            n_train = int(manifest.get("n_train", train.n))
            n_test = int(manifest.get("n_test", test.n))
            base = datagen.ClassificationTask(train.subset(np.arange(min(n_train, train.n))),
                                              test.subset(np.arange(min(n_test, test.n))),
                                              name="idx")
        else:
            raise ConfigError(f"unknown generator {gen!r}")
    except KeyError as exc:
        raise ConfigError(f"manifest is missing {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad manifest value: {exc}") from None
    return datagen.permuted_task_stream(base, num_tasks, stream_seed)


def cmd_cl_run(cfg: ExperimentConfig, args) -> int:
    sec = cfg.cl
    for m in sec.methods:
        if m not in ("sgd", "ewc", "rsp"):
            raise ConfigError(f"unknown method {m!r}")
    if sec.manifest:
        mpath = Path(sec.manifest)
        manifest, base_dir = read_manifest(mpath), mpath.parent
    else:
        manifest, base_dir = {}, Path(".")
    out = Path(args.out)
    metrics = {}
    for seed in _seeds(cfg, sec.n_seeds):
        tasks = build_stream(manifest, seed, base_dir)
        ccfg = rsp.ClConfig(lam=sec.lam, lr=sec.lr, batch_size=sec.batch_size,
                            memory_budget=sec.memory_budget, k_groups=sec.k_groups,
                            hidden=sec.hidden, covariance_source=sec.covariance_source, seed=seed)
        for m in sec.methods:
            res = rsp.run_task_stream(tasks, m, ccfg)
            metrics.setdefault(m, {})[str(seed)] = res.metrics.to_dict()
            n = len(tasks)
            write_table(out / f"accuracy_{m}_seed{seed}.csv",
                        ["after_task", *[f"task_{j + 1}" for j in range(n)]],
                        [[i + 1, *res.metrics.accuracy[i]] for i in range(n)], cfg)
    write_json(out / "metrics.json", {"config_hash": cfg.hash(), "methods": metrics})
    return 0


# ---------------------------------------------------------------------------
# datagen


def cmd_datagen(cfg: ExperimentConfig, args) -> int:
    sec = cfg.datagen
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    comment = f"config_hash={cfg.hash()}"
    names = [f"x{i + 1}" for i in range(datagen.FRIEDMAN_DIM)]
    if sec.kind == "friedman":
        noise = _mixture(sec.mixture).with_scale(sec.noise_scale)
        for i, d in enumerate(datagen.friedman_domains(sec.n, seed=cfg.seed)):
            d = datagen.inject_mog_noise(d, noise, cfg.seed * 1000 + i)
            datagen.write_csv(out / f"domain_{i + 1}.csv", d, names, "y", comment)
    elif sec.kind == "friedman_uniform":
        d = robustness.friedman_uniform(sec.n, cfg.seed)
        d = datagen.inject_mog_noise(d, _mixture(sec.mixture).with_scale(sec.noise_scale),
                                     cfg.seed + 7)
        datagen.write_csv(out / "friedman_uniform.csv", d, names, "y", comment)
    else:
        raise ConfigError(f"unknown datagen kind {sec.kind!r}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    # flags are accepted before or after the command; SUPPRESS keeps either from clobbering the other
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="key = value config file with per-experiment sections")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="master seed (unsigned 64-bit)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default results)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="vncond", description=__doc__.splitlines()[0],
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    d = sub.add_parser("divergence", parents=[common], help="divergences between two CSV files")
    d.add_argument("file_a", nargs="?")
    d.add_argument("file_b", nargs="?")
    d.add_argument("--response", default=None)
    d.set_defaults(func=cmd_divergence)

    m = sub.add_parser("mdd", help="multi-source domain adaptation")
    msub = m.add_subparsers(dest="mode", required=True)
    msub.add_parser("synthetic", parents=[common]).set_defaults(func=cmd_mdd_synthetic)
    msub.add_parser("csv", parents=[common]).set_defaults(func=cmd_mdd_csv)

    sub.add_parser("robustness", parents=[common],
                   help="jvn vs mse under mixture label noise").set_defaults(func=cmd_robustness)

    c = sub.add_parser("cl", help="continual learning")
    csub = c.add_subparsers(dest="mode", required=True)
    csub.add_parser("run", parents=[common]).set_defaults(func=cmd_cl_run)

    sub.add_parser("datagen", parents=[common],
                   help="write synthetic datasets").set_defaults(func=cmd_datagen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", "results"), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        return args.func(cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, spd.NumericalFailure) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
