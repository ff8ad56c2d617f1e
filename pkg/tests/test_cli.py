import csv

import numpy as np
import pytest

from stcgat import cli
from stcgat.checkpoint import load_checkpoint
from stcgat.data import RawDataset, export_csv, ingest

TINY_FLAGS = ["--window", "6", "--hidden", "4", "--heads", "1", "--embed-dim", "2", "--head-hidden", "8",
              "--batch", "32"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--nodes", "4", "--steps", "200", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = cli.main(["train", "--data", str(synth_dir / "synth.stds"), "--epochs", "2", "--seed", "7",
                     "--out", str(out)] + TINY_FLAGS)
    assert code == 0
    return out


def test_synth_outputs(synth_dir):
    ds = ingest(synth_dir / "synth.stds")
    assert (ds.n_nodes, ds.total_steps) == (4, 200)
    text = (synth_dir / "edges.csv").read_text()
    assert text.startswith("# ") and "rho*e_i(t-1)" in text


def test_train_writes_epoch_log_and_checkpoint(trained):
    log = rows(trained / "epochs.csv")
    assert [r["epoch"] for r in log] == ["1", "2"]
    assert all(r["wall_seconds"] == "" for r in log)
    header = [ln for ln in (trained / "epochs.csv").read_text().splitlines() if ln.startswith("#")]
    assert "# command=train" in header and "# seed=7" in header
    assert not any(ln.startswith("# out=") for ln in header)
    model, _ = load_checkpoint(trained / "checkpoint.stcg")
    assert model.config.hidden == 4 and model.config.seed == 7


def test_rerun_from_resolved_config_is_identical(trained, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["train", "--config", str(trained / "config.resolved"), "--out", str(again)]) == 0
    assert (again / "epochs.csv").read_bytes() == (trained / "epochs.csv").read_bytes()
    assert (again / "checkpoint.stcg").read_bytes() == (trained / "checkpoint.stcg").read_bytes()


def test_seed_from_environment(synth_dir, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    out = tmp_path / "env"
    args = ["train", "--data", str(synth_dir / "synth.stds"), "--epochs", "1", "--out", str(out)] + TINY_FLAGS
    assert cli.main(args) == 0
    assert "seed=7" in (out / "config.resolved").read_text().splitlines()


def test_eval_with_baseline(trained, synth_dir, tmp_path, capsys):
    out = tmp_path / "eval"
    code = cli.main(["eval", "--checkpoint", str(trained / "checkpoint.stcg"),
                     "--data", str(synth_dir / "synth.stds"), "--baseline", "ha", "--out", str(out)])
    assert code == 0
    model_rows, ha_rows = rows(out / "metrics.csv"), rows(out / "metrics_ha.csv")
    assert [r["horizon"] for r in model_rows] == [str(h) for h in range(1, 7)] + ["all"]
    assert [r["count"] for r in model_rows] == [r["count"] for r in ha_rows]
    assert "MAE" in capsys.readouterr().out


def test_eval_config_mismatch_exits_2(trained, synth_dir, tmp_path):
    code = cli.main(["eval", "--checkpoint", str(trained / "checkpoint.stcg"),
                     "--data", str(synth_dir / "synth.stds"), "--hidden", "5", "--out", str(tmp_path)])
    assert code == cli.EXIT_USAGE


def test_ha_on_constant_series_is_exact(tmp_path):
    export_csv(RawDataset(np.full((3, 150, 1), 42.0, dtype=np.float32)), tmp_path / "c.csv")
    out = tmp_path / "ha"
    assert cli.main(["eval", "--data", str(tmp_path / "c.csv"), "--baseline", "ha", "--out", str(out)]) == 0
    table = rows(out / "metrics_ha.csv")
    assert len(table) == 13 and all(float(r["mae"]) == 0.0 for r in table)


def test_predict_rows(trained, synth_dir, tmp_path):
    readings = ingest(synth_dir / "synth.stds").readings
    export_csv(RawDataset(readings[:, 50:56]), tmp_path / "in.csv")
    out = tmp_path / "pred"
    code = cli.main(["predict", "--checkpoint", str(trained / "checkpoint.stcg"),
                     "--input", str(tmp_path / "in.csv"), "--out", str(out)])
    assert code == 0
    table = rows(out / "forecast.csv")
    assert len(table) == 4 * 6
    assert {(int(r["node"]), int(r["horizon"])) for r in table} == {(n, h) for n in range(4) for h in range(1, 7)}
    model, stats = load_checkpoint(trained / "checkpoint.stcg")
    expected = stats.invert(model.predict(stats.apply(readings[None, :, 50:56])))[0]
    got = np.array([float(r["value"]) for r in table]).reshape(4, 6)
    np.testing.assert_allclose(got, expected[:, :, 0], rtol=1e-12)


def test_predict_wrong_length_exits_2(trained, synth_dir, tmp_path):
    readings = ingest(synth_dir / "synth.stds").readings
    export_csv(RawDataset(readings[:, :5]), tmp_path / "short.csv")
    code = cli.main(["predict", "--checkpoint", str(trained / "checkpoint.stcg"),
                     "--input", str(tmp_path / "short.csv"), "--out", str(tmp_path)])
    assert code == cli.EXIT_USAGE


def test_gradcheck_command(tmp_path, capsys):
    small = ["--n-nodes", "3", "--window", "4", "--hidden", "4", "--heads", "1", "--embed-dim", "2",
             "--head-hidden", "8"]
    assert cli.main(["gradcheck", "--out", str(tmp_path / "ok")] + small) == cli.EXIT_OK
    assert capsys.readouterr().out.rstrip().endswith("PASS")
    code = cli.main(["gradcheck", "--out", str(tmp_path / "bad"), "--corrupt", "head.w1"] + small)
    assert code == cli.EXIT_CHECK
    text = capsys.readouterr().out
    assert text.rstrip().endswith("FAIL: head.w1")
    names = [r["parameter"] for r in rows(tmp_path / "bad" / "gradcheck.csv")]
    assert len(names) == len(set(names)) and "head.w1" in names


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["frobnicate"],
    ["train", "--data", "/nonexistent/file.stds", "--out", "/tmp/x"],
    ["gradcheck", "--hidden", "64", "--out", "/tmp/x"],
    ["train", "--data", "x.stds"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert cli.main(argv) == cli.EXIT_USAGE


def test_config_file_key_outside_command_is_rejected(tmp_path, synth_dir):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# settings\ncorrupt=head.w1\n")
    code = cli.main(["train", "--config", str(cfg), "--data", str(synth_dir / "synth.stds"), "--out",
                     str(tmp_path / "o")])
    assert code == cli.EXIT_USAGE


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("hidden=16\nlr=0.01\n")
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--hidden", "8"])
    settings = cli.resolve("train", args, environ={})
    assert settings["hidden"] == 8 and settings["lr"] == 0.01 and "seed" not in settings
