"""CLI tests: argument plumbing, exit codes, artifacts of every subcommand."""

import numpy as np
import pytest

from osegnet.cli import RunConfig, main, read_config_file, resolve_config
from osegnet.data import load_pgm, save_pgm, synth_generate
from osegnet.model import ModelConfig, build_model, load_checkpoint
from osegnet.tensor import Tensor

SMALL = ["--encoder-channels", "4,4,4,4,4", "--input-size", "32", "--q", "1"]


@pytest.fixture()
def dataset(tmp_path):
    root = tmp_path / "ds"
    synth_generate(10, 32, seed=3, out_dir=root)
    return root / "index.tsv"


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestConfigFile:
    def test_parses_types_and_comments(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "# run settings\n"
            "lr = 0.01  # fast\n"
            "epochs = 7\n"
            "augment = off\n"
            "encoder_channels = 4, 8, 16\n"
            "data_index = some/index.tsv\n",
            encoding="utf-8")
        values = read_config_file(cfg)
        assert values == {"lr": 0.01, "epochs": 7, "augment": False,
                          "encoder_channels": (4, 8, 16), "data_index": "some/index.tsv"}

    def test_unknown_key_rejected_with_line(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("learning_rate = 0.1\n", encoding="utf-8")
        with pytest.raises(ValueError, match=":1:"):
            read_config_file(cfg)

    def test_missing_equals_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("lr 0.1\n", encoding="utf-8")
        with pytest.raises(ValueError, match="key = value"):
            read_config_file(cfg)

    def test_bad_boolean_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("augment = maybe\n", encoding="utf-8")
        with pytest.raises(ValueError, match="boolean"):
            read_config_file(cfg)

    def test_flag_overrides_file_overrides_default(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("lr = 0.01\nepochs = 9\n", encoding="utf-8")

        class Args:
            config = str(cfg)
            lr = 0.5
        resolved = resolve_config(Args())
        assert resolved.lr == 0.5       # flag wins
        assert resolved.epochs == 9     # file beats default
        assert resolved.batch_size == RunConfig().batch_size  # default survives


class TestSynthCommand:
    def test_writes_dataset_and_log(self, tmp_path, capsys):
        out = tmp_path / "ds"
        assert run_cli("synth", "--count", 5, "--size", 32, "--seed", 1, "--out", out) == 0
        assert (out / "index.tsv").is_file()
        assert len(list((out / "images").glob("*.pgm"))) == 5
        log = (out / "run.log").read_text()
        assert "command = synth" in log and "count = 5" in log
        assert str(out / "index.tsv") in capsys.readouterr().out

    def test_missing_out_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("synth", "--count", "5", "--size", "32")
        assert exc.value.code == 2

    def test_bad_size_is_usage_error(self, tmp_path):
        assert run_cli("synth", "--count", 5, "--size", 33, "--out", tmp_path / "x") == 2


class TestTrainCommand:
    def test_zero_epochs_writes_initial_checkpoint(self, dataset, tmp_path):
        out = tmp_path / "run"
        code = run_cli("train", *SMALL, "--index", dataset, "--epochs", 0,
                       "--seed", 7, "--out", out)
        assert code == 0
        cfg = ModelConfig(q_order=1, input_size=32, encoder_channels=(4, 4, 4, 4, 4))
        loaded = load_checkpoint(out / "checkpoint.ckpt", cfg)
        fresh = build_model(cfg, np.random.default_rng(7))
        for (name, a), (_, b) in zip(fresh.named_parameters(), loaded.named_parameters()):
            assert np.array_equal(a.data, b.data), name
        log = (out / "train_log.csv").read_text().splitlines()
        assert log == ["epoch,mean_loss,train_pixel_f1,elapsed_ms"]

    def test_loss_drops_over_short_run(self, dataset, tmp_path):
        out = tmp_path / "run"
        code = run_cli("train", *SMALL, "--index", dataset, "--epochs", 3,
                       "--lr", 0.003, "--no-augment", "--seed", 0, "--out", out)
        assert code == 0
        rows = (out / "train_log.csv").read_text().splitlines()[1:]
        assert len(rows) == 3
        losses = [float(r.split(",")[1]) for r in rows]
        assert losses[-1] < losses[0]
        log = (out / "run.log").read_text()
        assert "trainable_params" in log and "command = train" in log

    def test_augment_flag_recorded(self, dataset, tmp_path):
        out = tmp_path / "run"
        run_cli("train", *SMALL, "--index", dataset, "--epochs", 0,
                "--no-augment", "--out", out)
        assert "augment = False" in (out / "config.txt").read_text()

    def test_nonfinite_loss_aborts_keeping_checkpoint(self, dataset, tmp_path,
                                                      monkeypatch, capsys):
        def poisoned(*a, **k):
            return Tensor(np.array([np.nan], dtype=np.float32))

        monkeypatch.setattr("osegnet.cli.hybrid_loss", poisoned)
        out = tmp_path / "run"
        code = run_cli("train", *SMALL, "--index", dataset, "--epochs", 2, "--out", out)
        assert code == 1
        assert "aborting: non-finite loss at epoch 1" in capsys.readouterr().err
        assert (out / "checkpoint.ckpt").is_file()  # init checkpoint survives

    def test_missing_index_fails_with_io_code(self, tmp_path):
        code = run_cli("train", *SMALL, "--index", tmp_path / "none.tsv",
                       "--epochs", 1, "--out", tmp_path / "run")
        assert code == 1

    def test_config_file_drives_training(self, dataset, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            f"data_index = {dataset}\nepochs = 0\nq_order = 1\ninput_size = 32\n"
            "encoder_channels = 4,4,4,4,4\nseed = 5\n", encoding="utf-8")
        out = tmp_path / "run"
        assert run_cli("train", "--config", cfg, "--out", out) == 0
        assert "seed = 5" in (out / "run.log").read_text()


class TestEvalCommand:
    def test_oracle_predictor_is_perfect(self, dataset, tmp_path, capsys):
        out = tmp_path / "ev"
        code = run_cli("eval", *SMALL, "--index", dataset, "--predictor", "oracle",
                       "--out", out)
        assert code == 0
        pixel = (out / "metrics_pixel.csv").read_text().splitlines()[1].split(",")
        sample = (out / "metrics_sample.csv").read_text().splitlines()[1].split(",")
        assert pixel[0] == "pixel" and sample[0] == "sample"
        assert float(pixel[9]) == 1.0   # f1
        assert float(sample[8]) == 1.0  # accuracy
        stdout = capsys.readouterr().out
        assert "actual positive" in stdout
        assert "f1 = 100.00%" in stdout

    def test_zero_predictor_has_zero_sensitivity(self, dataset, tmp_path, capsys):
        out = tmp_path / "ev"
        code = run_cli("eval", *SMALL, "--index", dataset, "--predictor", "zero",
                       "--out", out)
        assert code == 0
        pixel = (out / "metrics_pixel.csv").read_text().splitlines()[1].split(",")
        assert float(pixel[5]) == 0.0  # sensitivity
        assert float(pixel[6]) == 1.0  # specificity

    def test_counts_injection_reproduces_published_row(self, tmp_path, capsys):
        out = tmp_path / "ev"
        code = run_cli("eval", "--counts", "2057,40,25556,56", "--out", out)
        assert code == 0
        stdout = capsys.readouterr().out
        assert "97.35 99.84 98.09 97.72 97.50 99.65" in stdout
        assert (out / "metrics_sample.csv").is_file()

    def test_bad_counts_is_usage_error(self, tmp_path, capsys):
        assert run_cli("eval", "--counts", "1,2,3", "--out", tmp_path / "ev") == 2
        assert "usage error" in capsys.readouterr().err

    def test_model_predictor_requires_ckpt(self, dataset, tmp_path, capsys):
        code = run_cli("eval", *SMALL, "--index", dataset, "--out", tmp_path / "ev")
        assert code == 2
        assert "--ckpt" in capsys.readouterr().err

    def test_model_predictor_end_to_end(self, dataset, tmp_path):
        run_dir = tmp_path / "run"
        run_cli("train", *SMALL, "--index", dataset, "--epochs", 0, "--out", run_dir)
        out = tmp_path / "ev"
        code = run_cli("eval", *SMALL, "--index", dataset, "--ckpt",
                       run_dir / "checkpoint.ckpt", "--out", out)
        assert code == 0
        assert (out / "metrics_pixel.csv").is_file()
        assert (out / "metrics_sample.csv").is_file()

    def test_train_only_index_rejected(self, tmp_path):
        root = tmp_path / "ds"
        synth_generate(3, 32, seed=1, out_dir=root)  # 3 samples: all train
        with pytest.warns(UserWarning, match="empty test split"):
            code = run_cli("eval", *SMALL, "--index", root / "index.tsv",
                           "--predictor", "oracle", "--out", tmp_path / "ev")
        assert code == 1


class TestPredictCommand:
    @pytest.fixture()
    def trained(self, dataset, tmp_path):
        run_dir = tmp_path / "run"
        run_cli("train", *SMALL, "--index", dataset, "--epochs", 0, "--seed", 2,
                "--out", run_dir)
        return run_dir / "checkpoint.ckpt"

    def test_writes_probability_mask(self, dataset, trained, tmp_path, capsys):
        image = dataset.parent / "images" / "s00004.pgm"
        out = tmp_path / "pr"
        code = run_cli("predict", *SMALL, "--ckpt", trained, "--image", image,
                       "--out", out)
        assert code == 0
        mask = load_pgm(out / "s00004_mask.pgm")
        assert mask.shape == (32, 32)
        assert str(out / "s00004_mask.pgm") in capsys.readouterr().out

    def test_binary_flag_writes_thresholded_mask(self, dataset, trained, tmp_path):
        image = dataset.parent / "images" / "s00004.pgm"
        out = tmp_path / "pr"
        code = run_cli("predict", *SMALL, "--ckpt", trained, "--image", image,
                       "--binary", "--out", out)
        assert code == 0
        binary = load_pgm(out / "s00004_mask_bin.pgm")
        assert set(np.unique(binary)) <= {0, 255}

    def test_repeat_runs_byte_identical(self, dataset, trained, tmp_path):
        image = dataset.parent / "images" / "s00004.pgm"
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_cli("predict", *SMALL, "--ckpt", trained, "--image", image, "--out", out)
            blobs.append((out / "s00004_mask.pgm").read_bytes())
        assert blobs[0] == blobs[1]

    def test_size_mismatch_suggests_resize(self, trained, tmp_path, capsys):
        big = tmp_path / "big.pgm"
        save_pgm(np.zeros((64, 64), np.uint8), big)
        code = run_cli("predict", *SMALL, "--ckpt", trained, "--image", big,
                       "--out", tmp_path / "pr")
        assert code == 1
        assert "resize the image" in capsys.readouterr().err

    def test_missing_checkpoint_fails(self, dataset, tmp_path):
        image = dataset.parent / "images" / "s00004.pgm"
        code = run_cli("predict", *SMALL, "--ckpt", tmp_path / "none.ckpt",
                       "--image", image, "--out", tmp_path / "pr")
        assert code == 1


class TestGradcheckCommand:
    def test_clean_run_passes(self, capsys):
        assert run_cli("gradcheck", "--seed", "0") == 0
        out = capsys.readouterr().out
        for kind in ("conv", "oper", "oper-transpose", "batchnorm", "dice", "focal"):
            assert f"\n{kind} " in "\n" + out or out.startswith(f"{kind} ")
        assert "e2e.oper" in out
        assert "all gradient checks passed" in out

    def test_corrupt_negative_control_fails_naming_kind(self, capsys):
        assert run_cli("gradcheck", "--corrupt", "dice") == 1
        captured = capsys.readouterr()
        assert "FAIL" in captured.out
        assert "dice" in captured.err

    def test_out_dir_gets_run_log(self, tmp_path):
        out = tmp_path / "gc"
        assert run_cli("gradcheck", "--out", out) == 0
        assert "command = gradcheck" in (out / "run.log").read_text()


class TestTopLevel:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("--version")
        assert exc.value.code == 0
        assert "osegnet" in capsys.readouterr().out

    def test_unknown_command_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 2

    def test_unknown_config_key_maps_to_usage_exit(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("warp_speed = 9\n", encoding="utf-8")
        code = run_cli("train", "--config", cfg, "--out", tmp_path / "run")
        assert code == 2
        assert "usage error" in capsys.readouterr().err
