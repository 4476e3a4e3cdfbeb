import json
import subprocess
import sys

import pytest

from mliotrim.cli import main
from mliotrim.features import FeatureTable
from mliotrim.models import load_model


@pytest.fixture(scope="module")
def features_csv(tmp_path_factory, small_corpus):
    path = tmp_path_factory.mktemp("cli") / "features.csv"
    small_corpus.table.to_csv(path)
    return path


def test_eval_global_writes_report(tmp_path, features_csv, capsys):
    out = tmp_path / "report.csv"
    assert main(["eval", "--experiment", "global", "--features", str(features_csv), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("experiment,model,window,scope")
    assert lines[1].startswith("global,rf,60,global,")
    assert "F1(non-essential)=" in capsys.readouterr().out


def test_run_with_missing_model_names_the_path(tmp_path, capsys):
    roster = tmp_path / "roster.json"
    roster.write_text(json.dumps({"cam": "192.168.1.20"}))
    missing = tmp_path / "no-such-model.bin"
    argv = ["run", "--models", str(missing), "--out", str(tmp_path / "o"), "--capture-dir", str(tmp_path), "--roster", str(roster)]
    assert main(argv) != 0
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["frobnicate"], ["eval", "--bogus"], ["train"], []])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mliotrim", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("ingest", "label", "train", "eval", "run", "bench"):
        assert cmd in res.stdout


def test_config_file_and_env_precedence(tmp_path, features_csv, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 1, "train": {"trees": 3, "model_kind": "rf"}}))
    out = tmp_path / "m.bin"
    assert main(["train", "--features", str(features_csv), "--config", str(cfg), "--out", str(out)]) == 0
    assert load_model(out).n_trees == 3
    # an explicit flag beats the config value
    assert main(["train", "--features", str(features_csv), "--config", str(cfg), "--trees", "4", "--out", str(out)]) == 0
    assert load_model(out).n_trees == 4
    monkeypatch.setenv("MLIOTRIM_CONFIG", str(cfg))
    assert main(["train", "--features", str(features_csv), "--out", str(out)]) == 0
    assert load_model(out).n_trees == 3
    cfg.write_text("{not json")
    assert main(["train", "--features", str(features_csv), "--out", str(out)]) == 2


def test_bench_reduced_grid(tmp_path):
    out = tmp_path / "bench.csv"
    argv = ["bench", "--rotations", "60", "--threads", "1,2", "--repeats", "1", "--out", str(out)]
    assert main(argv) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "r,n,t_f,t_i,T,k,N" and len(rows) == 3
    for line in rows[1:]:
        r, n, *_, k, N = line.split(",")
        assert int(N) == int(n) * int(k)
    assert (tmp_path / "bench_sequential.csv").read_text().startswith("r,devices,t_f,t_i,total")


def test_label_simulate(tmp_path):
    out = tmp_path / "labels.csv"
    assert main(["label", "simulate", "--random", "3", "--out", str(out), "--report", str(tmp_path / "r.csv")]) == 0
    assert out.read_text().startswith("device,destination,label,phase")


def test_synth_ingest_train_run(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--days", "2", "--span", "21600", "--out", str(data)]) == 0
    roster = data / "roster.json"
    caps = sorted(str(p) for p in data.glob("*.pcap"))
    assert caps and roster.exists() and (data / "labels.csv").exists()

    feats = tmp_path / "f.csv"
    argv = ["ingest", *caps, "--roster", str(roster), "--labels", str(data / "labels.csv"), "--out", str(feats)]
    assert main(argv) == 0
    table = FeatureTable.from_csv(feats)
    assert len(table) > 0 and table.labeled

    model = tmp_path / "m.bin"
    assert main(["train", "--features", str(feats), "--trees", "10", "--out", str(model)]) == 0
    assert set(load_model(model).profiles) == set(table.devices())

    out = tmp_path / "gw"
    argv = ["run", "--models", str(model), "--out", str(out), "--capture-dir", str(data), "--roster", str(roster), "--rotation", "600"]
    assert main(argv) == 0
    assert (out / "ipblock.rules").exists() and (out / "decisions.csv").exists()
