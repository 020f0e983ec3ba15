import csv
import json
import math

import numpy as np
import pytest

from vncond import cli, datagen
from vncond.config import ConfigError, ExperimentConfig, load_config, parse_config, read_manifest
from vncond.spd import DatasetBatch

SMALL = """\
seed = 3
[mdd]
n_per_domain = 120
epochs = 1
batch_size = 60
hidden = 8
features = 4
[robustness]
lambdas = 0, 8
n_seeds = 1
n_train = 100
n_test = 100
epochs = 1
hidden = 8
[cl]
lam = 1.0
hidden = 8, 8
k_groups = 3
"""

MANIFEST = "generator = blobs\nnum_tasks = 2\nn_train = 60\nn_test = 30\nwidth = 12\nn_classes = 3\n"


def read_table(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return list(csv.reader(lines[1:]))


@pytest.fixture
def small_config(tmp_path):
    (tmp_path / "m.txt").write_text(MANIFEST)
    p = tmp_path / "c.ini"
    p.write_text(SMALL + f"manifest = {tmp_path / 'm.txt'}\n")
    return p


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg == ExperimentConfig() and cfg.mdd.epochs == 30

    def test_types_and_tuples(self):
        cfg = parse_config("[robustness]\nlambdas = 0, 2.5\nhidden = 4,4\n[mdd]\nbaseline = yes\n")
        assert cfg.robustness.lambdas == (0.0, 2.5)
        assert cfg.robustness.hidden == (4, 4)
        assert cfg.mdd.baseline is True

    @pytest.mark.parametrize("text", ["[mdd]\nepoch = 3\n", "[nope]\na = 1\n", "colour = red\n",
                                      "[mdd]\nepochs = many\n", "[mdd\n"])
    def test_rejects_bad_input(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_seed_override(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("seed = 4\n")
        assert load_config(p).seed == 4
        assert load_config(p, seed=9).seed == 9
        with pytest.raises(ConfigError):
            load_config(p, seed=-1)

    def test_hash_tracks_content(self):
        a, b = parse_config("seed = 1\n"), parse_config("seed = 1\n")
        assert a.hash() == b.hash() != parse_config("seed = 2\n").hash()

    def test_manifest(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("# stream\ngenerator = blobs  # default\n\nnum_tasks=3\n")
        assert read_manifest(p) == {"generator": "blobs", "num_tasks": "3"}
        p.write_text("a = 1\na = 2\n")
        with pytest.raises(ConfigError):
            read_manifest(p)
        p.write_text("just words\n")
        with pytest.raises(ConfigError):
            read_manifest(p)


class TestDivergenceCommand:
    def write(self, path, x, y):
        datagen.write_csv(path, DatasetBatch(x, y))

    def test_same_file_is_zero(self, tmp_path, rng, capsys):
        x = rng.standard_normal((30, 2))
        self.write(tmp_path / "a.csv", x, x[:, 0] + rng.standard_normal(30))
        assert cli.main(["divergence", str(tmp_path / "a.csv"), str(tmp_path / "a.csv")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["vn_ab"] == out["vn_ba"] == out["jeffery"] == 0.0
        assert out["conditional"] == pytest.approx(0.0, abs=1e-12)

    def test_shared_features_reduction(self, tmp_path, rng, capsys):
        x = rng.standard_normal((50, 3))
        y = x[:, 0] + rng.standard_normal(50)
        self.write(tmp_path / "a.csv", x, y)
        self.write(tmp_path / "b.csv", x, 2 * y)
        assert cli.main(["divergence", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["conditional"] == pytest.approx(out["jeffery"], abs=1e-9)

    def test_missing_file(self, tmp_path, capsys):
        assert cli.main(["divergence", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 2
        assert "no such file" in capsys.readouterr().err

    def test_schema_mismatch(self, tmp_path, rng, capsys):
        self.write(tmp_path / "a.csv", rng.standard_normal((5, 2)), rng.standard_normal(5))
        self.write(tmp_path / "b.csv", rng.standard_normal((5, 3)), rng.standard_normal(5))
        assert cli.main(["divergence", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 2
        assert "schema" in capsys.readouterr().err


class TestExperimentCommands:
    def test_mdd_synthetic_smoke(self, small_config, tmp_path):
        out = tmp_path / "o"
        assert cli.main(["mdd", "synthetic", "--config", str(small_config), "--out", str(out)]) == 0
        rows = read_table(out / "weights.csv")
        assert rows[0][0] == "target" and len(rows) == 7
        for i, row in enumerate(rows[1:]):
            assert row[i + 1] == ""
            assert math.fsum(float(v) for v in row[1:] if v) == 1.0
        assert len(read_table(out / "mae.csv")) == 7
        trace = read_table(out / "trace_target3_seed3.csv")
        assert trace[0][:3] == ["epoch", "weighted_risk", "m_disc"] and len(trace) == 2

    def test_mdd_csv(self, tmp_path, small_config):
        doms = datagen.friedman_domains(80, seed=0)
        paths = []
        for i, d in enumerate(doms[:3]):
            paths.append(tmp_path / f"d{i}.csv")
            datagen.write_csv(paths[-1], d)
        cfg = tmp_path / "csv.ini"
        cfg.write_text("[mdd]\nepochs = 1\nbatch_size = 40\nhidden = 8\nfeatures = 4\n"
                       f"sources = {paths[0]}, {paths[1]}\ntarget = {paths[2]}\n")
        out = tmp_path / "o"
        assert cli.main(["mdd", "csv", "--config", str(cfg), "--out", str(out)]) == 0
        w = read_table(out / "weights.csv")
        assert math.fsum(float(r[2]) for r in w[1:]) == 1.0
        assert (out / "mae.csv").exists()

    def test_mdd_csv_requires_files(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[mdd]\nepochs = 1\n")
        assert cli.main(["mdd", "csv", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_robustness_smoke(self, small_config, tmp_path):
        out = tmp_path / "o"
        assert cli.main(["robustness", "--config", str(small_config), "--out", str(out)]) == 0
        rows = read_table(out / "robustness.csv")
        assert rows[0] == ["lambda", "loss", "clean_test_rmse", "seed"]
        assert {(r[0], r[1]) for r in rows[1:]} == {("0.0", "jvn_sqrt"), ("0.0", "mse"),
                                                     ("8.0", "jvn_sqrt"), ("8.0", "mse")}

    def test_empty_lambda_grid(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[robustness]\nlambdas =\n")
        assert cli.main(["robustness", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_cl_run(self, small_config, tmp_path):
        out = tmp_path / "o"
        assert cli.main(["cl", "run", "--config", str(small_config), "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics["methods"]) == {"sgd", "ewc", "rsp"}
        for m in metrics["methods"].values():
            r = m["3"]
            assert r["BT"] == pytest.approx(r["RA"] - r["LA"])
        acc = read_table(out / "accuracy_rsp_seed3.csv")
        assert acc[0] == ["after_task", "task_1", "task_2"] and acc[1][2] == ""

    def test_cl_single_task_has_zero_bt(self, tmp_path):
        (tmp_path / "m.txt").write_text(MANIFEST.replace("num_tasks = 2", "num_tasks = 1"))
        cfg = tmp_path / "c.ini"
        cfg.write_text(f"[cl]\nmanifest = {tmp_path / 'm.txt'}\nhidden = 8, 8\nk_groups = 2\n")
        assert cli.main(["cl", "run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
        assert all(m["0"]["BT"] == 0.0 for m in metrics["methods"].values())

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.txt").write_text("generator = clouds\n")
        cfg = tmp_path / "c.ini"
        cfg.write_text(f"[cl]\nmanifest = {tmp_path / 'm.txt'}\n")
        assert cli.main(["cl", "run", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_idx_manifest(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (40, 3, 3)).astype(np.uint8)
        labels = rng.integers(0, 2, 40).astype(np.uint8)
        for split in ("train", "test"):
            datagen.write_idx(tmp_path / f"{split}-images.idx", imgs)
            datagen.write_idx(tmp_path / f"{split}-labels.idx", labels)
        (tmp_path / "m.txt").write_text(
            "generator = idx\nnum_tasks = 2\ntrain_images = train-images.idx\n"
            "train_labels = train-labels.idx\ntest_images = test-images.idx\n"
            "test_labels = test-labels.idx\n")
        tasks = cli.build_stream(read_manifest(tmp_path / "m.txt"), 0, tmp_path)
        assert len(tasks) == 2 and tasks[0].width == 9

    def test_datagen(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[datagen]\nn = 20\nnoise_scale = 2\n")
        assert cli.main(["datagen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
        b = datagen.load_csv(tmp_path / "d" / "domain_4.csv", "y")
        assert b.features.shape == (20, 12)

    def test_unknown_mixture(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[datagen]\nmixture = pepper\nn = 5\n")
        assert cli.main(["datagen", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_global_flags_before_command(self, tmp_path):
        out = tmp_path / "d"
        cfg = tmp_path / "c.ini"
        cfg.write_text("[datagen]\nn = 5\n")
        assert cli.main(["--seed", "5", "--out", str(out), "datagen", "--config", str(cfg)]) == 0
        assert (out / "domain_1.csv").exists()

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["bogus"])
        assert exc.value.code == 2
