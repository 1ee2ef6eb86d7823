import json
import math
from pathlib import Path

import numpy as np
import pytest

from pll import harness as hz
from pll.cli import main
from pll.datagen import load_dataset

FAST_CONFIG = """
n = 240
n_test = 160
classes = 4
d_in = 8
spread = 0.25
epochs = 5
batch_size = 128
queue_size = 192
hidden = 32,32
d_emb = 16
seed = 11
"""


def write_config(tmp_path, extra="", base=FAST_CONFIG):
    path = tmp_path / "config.txt"
    path.write_text(base + extra)
    return path


class TestConfigParsing:
    def test_defaults_are_valid(self):
        hz.RunConfig().validate()

    def test_lambda_alias(self):
        values = hz.parse_config_text("lambda = 0.25")
        assert values == {"lam": 0.25}

    def test_comments_and_blank_lines(self):
        values = hz.parse_config_text("# a comment\n\ntau = 0.1  # trailing\n")
        assert values == {"tau": 0.1}

    def test_unknown_key_and_bad_value_both_reported(self):
        with pytest.raises(hz.ConfigError) as err:
            hz.parse_config_text("bogus = 1\nepochs = maybe\n")
        assert len(err.value.errors) == 2

    def test_validation_collects_all_failures(self):
        with pytest.raises(hz.ConfigError) as err:
            hz.RunConfig(method="nope", epochs=-1, tau=0.0, delta=1.5).validate()
        joined = "\n".join(err.value.errors)
        assert len(err.value.errors) >= 4
        assert "method" in joined and "tau" in joined and "delta" in joined

    def test_dataset_file_requires_test_dataset(self):
        with pytest.raises(hz.ConfigError, match="test_dataset"):
            hz.RunConfig(dataset="train.pll").validate()

    def test_config_echo_roundtrip(self):
        config = hz.RunConfig(seed=3, lam=0.7, method="picoplus")
        text = "\n".join(hz.config_lines(config))
        reparsed = hz.RunConfig(**hz.parse_config_text(text)).validate()
        assert reparsed == config


class TestCmdGen:
    def test_q_zero_sidecar_mean_one(self, tmp_path):
        config = hz.load_config(None, {"n": 50, "n_test": 10, "classes": 4,
                                       "d_in": 4, "q": 0.0, "seed": 1})
        sidecar = hz.cmd_gen(config, tmp_path)
        assert sidecar["stats"]["mean_candidates"] == 1.0
        assert sidecar["stats"]["fraction_true_missing"] == 0.0

    def test_eta_fraction_close_to_noise_rate(self, tmp_path):
        config = hz.load_config(None, {"n": 4000, "n_test": 10, "classes": 6,
                                       "d_in": 4, "q": 0.5, "eta": 0.2, "seed": 2})
        sidecar = hz.cmd_gen(config, tmp_path)
        frac = sidecar["stats"]["fraction_true_missing"]
        sigma = math.sqrt(0.2 * 0.8 / 4000)
        assert abs(frac - 0.2) < 3 * sigma

    def test_same_seed_identical_files(self, tmp_path):
        config = hz.load_config(None, {"n": 60, "n_test": 20, "classes": 3,
                                       "d_in": 4, "seed": 5})
        hz.cmd_gen(config, tmp_path / "a")
        hz.cmd_gen(config, tmp_path / "b")
        for name in ("dataset.pll", "test.pll"):
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes()

    def test_generated_files_load(self, tmp_path):
        config = hz.load_config(None, {"n": 30, "n_test": 10, "classes": 3,
                                       "d_in": 4, "seed": 6})
        hz.cmd_gen(config, tmp_path)
        train, c = load_dataset(tmp_path / "dataset.pll")
        test, _ = load_dataset(tmp_path / "test.pll")
        assert c == 3 and len(train) == 30 and len(test) == 10
        assert all(len(ex.candidates) == 1 for ex in test)


class TestCmdTrain:
    def test_zero_epochs_header_only_and_chance_accuracy(self, tmp_path):
        cfg = write_config(tmp_path, "epochs = 0\n")
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert rc == 0
        lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert lines == [",".join(hz.METRICS_COLUMNS)]
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        # untrained balanced accuracy sits near 1/C
        assert abs(summary["final_test_acc"] - 0.25) < 3 * math.sqrt(0.25 * 0.75 / 160)

    def test_rerun_bit_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "r1")])
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "r2")])
        assert (tmp_path / "r1" / "metrics.csv").read_bytes() == \
               (tmp_path / "r2" / "metrics.csv").read_bytes()

    def test_echoed_config_reproduces_metrics(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "r1")])
        main(["train", "--config", str(tmp_path / "r1" / "config.txt"),
              "--out", str(tmp_path / "r2")])
        assert (tmp_path / "r1" / "metrics.csv").read_bytes() == \
               (tmp_path / "r2" / "metrics.csv").read_bytes()

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["train", "--config", str(cfg), "--seed", "99",
              "--out", str(tmp_path / "r1")])
        summary = json.loads((tmp_path / "r1" / "summary.json").read_text())
        assert summary["config"]["seed"] == "99"

    def test_artifacts_written(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        for name in ("metrics.csv", "checkpoint.npz", "pseudo_targets.csv",
                     "embeddings.csv", "summary.json", "config.txt"):
            assert (tmp_path / "run" / name).exists()
        emb_header = (tmp_path / "run" / "embeddings.csv").read_text().splitlines()[0]
        assert emb_header.endswith("true_label,predicted_label")
        assert emb_header.startswith("emb_0,")

    def test_train_from_dataset_files(self, tmp_path):
        gen_cfg = hz.load_config(None, {"n": 200, "n_test": 80, "classes": 4,
                                        "d_in": 8, "seed": 3})
        hz.cmd_gen(gen_cfg, tmp_path / "data")
        cfg = write_config(
            tmp_path,
            f"dataset = {tmp_path / 'data' / 'dataset.pll'}\n"
            f"test_dataset = {tmp_path / 'data' / 'test.pll'}\n")
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert rc == 0

    def test_picoplus_metrics_have_clean_columns(self, tmp_path):
        cfg = write_config(tmp_path, "method = picoplus\nplus_warmup_epochs = 2\n"
                                     "knn_start_epoch = 3\n")
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        header = lines[0].split(",")
        i = header.index("clean_fraction")
        first, last = lines[1].split(","), lines[-1].split(",")
        assert first[i] == ""          # warm-up epochs have no split
        assert last[i] != ""
        assert 0.0 <= float(last[i]) <= 1.0

    def test_val_fraction_reported(self, tmp_path):
        cfg = write_config(tmp_path, "val_fraction = 0.1\n")
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["n_val"] == 24
        assert 0.0 <= summary["val_accuracy"] <= 1.0

    def test_policy_shortcut_method(self, tmp_path):
        cfg = write_config(tmp_path, "method = uniform\n")
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert rc == 0
        # uniform policy: pseudo-targets never sharpen, MMC stays at its start
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["final_mmc"] < 0.6


class TestCmdEvalAndExitCodes:
    def test_eval_roundtrip_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        gen_cfg = hz.load_config(str(cfg))
        hz.cmd_gen(gen_cfg, tmp_path / "data")
        r1 = hz.cmd_eval(tmp_path / "run" / "checkpoint.npz",
                         tmp_path / "data" / "test.pll")
        r2 = hz.cmd_eval(tmp_path / "run" / "checkpoint.npz",
                         tmp_path / "data" / "test.pll")
        assert r1 == r2
        assert 0.0 <= r1["accuracy"] <= 1.0
        assert 0.0 <= r1["mmc"] <= 1.0

    def test_bad_config_exits_one(self, tmp_path):
        cfg = write_config(tmp_path, "epochs = -3\nmethod = wat\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1

    def test_missing_config_file_exits_one(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.txt"),
                     "--out", str(tmp_path / "r")]) == 1

    def test_missing_subcommand_args_exit_one(self):
        assert main(["eval", "--checkpoint", "x.npz"]) == 1

    def test_numeric_overflow_exits_two(self, tmp_path):
        # a feature at float64 scale overflows the first affine layer
        rows = [f"1e308,1e308 | {i % 2} | {i % 2}" for i in range(8)]
        data = "pll v1 n=8 d=2 C=2\n" + "\n".join(rows) + "\n"
        (tmp_path / "train.pll").write_text(data)
        (tmp_path / "test.pll").write_text(data)
        cfg = write_config(
            tmp_path,
            f"dataset = {tmp_path / 'train.pll'}\n"
            f"test_dataset = {tmp_path / 'test.pll'}\nbatch_size = 8\nepochs = 1\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2

    def test_verify_exits_zero_and_prints_example(self, tmp_path, capsys):
        assert main(["verify", "--instances", "50"]) == 0
        out = capsys.readouterr().out
        assert "0.625" in out and "0.75" in out
        assert "PASS" in out

    def test_injected_fault_fails_verification(self):
        report = hz.cmd_verify(seed=0, n_instances=20, inject_fault=True)
        assert not report.all_passed
