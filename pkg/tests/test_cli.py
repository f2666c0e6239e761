import json

from splitbnn.cli import main
from splitbnn.io import load_model
from splitbnn.reconstruct import block_counts


def test_report_tables(capsys):
    assert main(["report", "--arch", "mnist-mlp"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["layer", "R=512", "R=256", "R=128"]
    assert out[2].split()[-3:] == ["4", "8", "16"]
    assert main(["report", "--arch", "cifar-cnn", "--capacities", "256"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert [r.split()[-1] for r in rows] == ["-", "6", "6", "9", "9", "18", "32", "4", "-"]


def test_power_table(capsys, tmp_path):
    assert main(["power", "--R", "128", "--json", str(tmp_path / "p.json")]) == 0
    out = capsys.readouterr().out
    assert "interface 93.3%  total 60.7%" in out
    assert "interface 85.7%" in out
    assert json.loads((tmp_path / "p.json").read_text())["savings_percent"]["BCNN-RRAM"]["total"] == 60.7


def test_train_reconstruct_simulate(tiny_mnist, tmp_path, capsys):
    model = str(tmp_path / "base")
    assert main(["train", "--data", str(tiny_mnist), "--arch", "784 64 64 10", "--epochs", "1", "--val-size", "50",
                 "--out", model]) == 0
    assert "seed 42" in capsys.readouterr().out
    split = str(tmp_path / "split")
    assert main(["reconstruct", "--model", model, "--R", "32", "--out", split]) == 0
    net, meta = load_model(split)
    assert block_counts(net) == [None, 2, None]
    assert meta["reconstruction"] == {"R": 32, "mode": "mapped"}
    capsys.readouterr()
    plan = tmp_path / "plan.json"
    assert main(["simulate", "--model", split, "--data", str(tiny_mnist), "--R", "32",
                 "--plan-out", str(plan)]) == 0
    assert "ADCs 0" in capsys.readouterr().out
    assert json.loads(plan.read_text())["census"]["adc_count"] == 0
    # the unsplit model cannot run on sense amplifiers
    assert main(["simulate", "--model", model, "--data", str(tiny_mnist), "--R", "32"]) == 2
    assert main(["simulate", "--model", model, "--data", str(tiny_mnist), "--R", "32",
                 "--output-mode", "ADC", "--bits", "2", "--quantizer", "lloyd-max",
                 "--calibration-size", "50"]) == 0


def test_sweep_writes_reports(tiny_mnist, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"arch": [784, 64, 64, 10], "capacities": [32], "retrain_capacities": [],
                               "bits": [1], "quantizers": ["linear"], "epochs": 1, "val_size": 50}))
    argv = ["sweep", "--config", str(cfg), "--data", str(tiny_mnist), "--cache-dir",
            str(tmp_path / "cache"), "--output-dir", str(tmp_path / "runs")]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "seed 42" in out
    reports = sorted((tmp_path / "runs").glob("report-*"))
    assert [p.suffix for p in reports] == [".csv", ".json"]
