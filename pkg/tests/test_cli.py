import filecmp
import os

import pytest

from facepad.cli import EXIT_DIVERGED, EXIT_IO, EXIT_USAGE, dispatch, read_config


def tree_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_identical(os.path.join(a, d), os.path.join(b, d))
                                               for d in cmp.common_dirs)


SMALL = ["--n-identities", "2", "--samples-per-id", "4", "--image-size", "16"]


def test_gen_data_byte_identical(tmp_path):
    assert dispatch(["gen-data", "--seed", "7", *SMALL, "--out", str(tmp_path / "a")]) == 0
    assert dispatch(["gen-data", "--seed", "7", *SMALL, "--out", str(tmp_path / "b")]) == 0
    assert tree_identical(tmp_path / "a", tmp_path / "b")
    assert (tmp_path / "a" / "manifest.csv").exists()


def test_env_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("FACEPAD_OUTPUT_ROOT", str(tmp_path))
    assert dispatch(["gen-data", *SMALL]) == 0
    assert (tmp_path / "gen-data" / "config.txt").exists()


def test_metrics_hand_file(tmp_path, capsys):
    scores = tmp_path / "s.csv"
    scores.write_text("score,label\n0.9,live\n0.8,live\n0.4,live\n0.6,attack\n0.2,attack\n0.1,attack\n")
    assert dispatch(["metrics", "--scores", str(scores), "--out", str(tmp_path / "m")]) == 0
    rows = dict(line.split(",") for line in (tmp_path / "m" / "metrics.csv").read_text().splitlines()[1:])
    assert float(rows["eer"]) == 1 / 3
    assert (tmp_path / "m" / "roc.png").stat().st_size > 0
    assert "EER" in capsys.readouterr().out


class TestExitCodes:
    def test_unknown_flag(self, tmp_path):
        assert dispatch(["train", "--no-such-flag", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_unknown_command(self):
        assert dispatch(["frobnicate"]) == EXIT_USAGE

    def test_missing_required(self, tmp_path):
        assert dispatch(["metrics", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_missing_file(self, tmp_path, capsys):
        assert dispatch(["metrics", "--scores", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == EXIT_IO
        assert "nope.csv" in capsys.readouterr().err

    def test_malformed_scores(self, tmp_path):
        bad = tmp_path / "s.csv"
        bad.write_text("score,label\nabc,live\n")
        assert dispatch(["metrics", "--scores", str(bad), "--out", str(tmp_path / "m")]) == EXIT_IO

    def test_bad_config_value(self, tmp_path):
        assert dispatch(["train", "--steps", "1", "--lr0", "-1", *SMALL, "--out", str(tmp_path)]) == EXIT_USAGE

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit(self, tmp_path):
        assert dispatch(["train", "--steps", "3", "--lr0", "1e300", "--batch-size", "4", *SMALL,
                         "--out", str(tmp_path)]) == EXIT_DIVERGED

    def test_help(self, capsys):
        assert dispatch(["train", "--help"]) == 0
        assert "--lambda2" in capsys.readouterr().out


def test_train_evaluate_and_echo_replay(tmp_path):
    run = tmp_path / "run"
    assert dispatch(["train", "--steps", "4", "--batch-size", "8", *SMALL, "--out", str(run)]) == 0
    for name in ("config.txt", "losses.csv", "model.fpck", "losses.png"):
        assert (run / name).exists()
    echo = read_config(run / "config.txt")
    assert echo["command"] == "train" and echo["steps"] == 4
    replay = tmp_path / "replay"
    assert dispatch(["train", "--config", str(run / "config.txt"), "--out", str(replay)]) == 0
    assert (run / "model.fpck").read_bytes() == (replay / "model.fpck").read_bytes()
    assert (run / "losses.csv").read_bytes() == (replay / "losses.csv").read_bytes()
    ev = tmp_path / "ev"
    assert dispatch(["evaluate", "--model", str(run / "model.fpck"), *SMALL, "--domain", "B",
                     "--out", str(ev)]) == 0
    header = (ev / "metrics.csv").read_text().splitlines()[0]
    assert header == "metric,value"
    assert "recognition_accuracy" in (ev / "metrics.csv").read_text()


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text('command = "gen-data"\nseed = 3\nn_identities = 2\nsamples_per_id = 4\nimage_size = 16\n')
    assert dispatch(["gen-data", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "o")]) == 0
    assert read_config(tmp_path / "o" / "config.txt")["seed"] == 9


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("bogus = 1\n")
    assert dispatch(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_transfer_writes_ppm(tmp_path):
    data = tmp_path / "d"
    assert dispatch(["gen-data", *SMALL, "--out", str(data)]) == 0
    imgs = sorted((data / "images").iterdir())
    src = [p for p in imgs if p.name.startswith("A_")][0]
    tgt = [p for p in imgs if p.name.startswith("B_")][0]
    out = tmp_path / "t"
    assert dispatch(["transfer", "--input", str(src), "--target", str(tgt), "--steps", "3",
                     "--out", str(out)]) == 0
    assert (out / f"{src.stem}_transferred.ppm").exists()
    values = [float(line.split(",")[2]) for line in (out / "objective.csv").read_text().splitlines()[1:]]
    assert values[-1] <= values[0]


def test_divergence_command(tmp_path):
    out = tmp_path / "dv"
    assert dispatch(["divergence", *SMALL, "--fda-epochs", "1", "--out", str(out)]) == 0
    for name in ("divergence.csv", "divergence_after.csv", "divergence.png", "transform.fpck"):
        assert (out / name).exists()
    assert (out / "divergence.csv").read_text().startswith("layer,channel,mu_a,sigma_a,mu_b,sigma_b,d")


def test_ablation_rows(tmp_path):
    out = tmp_path / "ab"
    assert dispatch(["ablation", "--seeds", "1,2,3", "--n-identities", "2", "--samples-per-id", "8",
                     "--image-size", "16", "--steps", "1", "--batch-size", "4", "--fda-epochs", "1",
                     "--out", str(out)]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 1 + 12
    assert (out / "ablation.png").exists()


def test_ablation_bad_seeds(tmp_path):
    assert dispatch(["ablation", "--seeds", "a,b", "--out", str(tmp_path)]) == EXIT_USAGE
