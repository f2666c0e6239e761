import json

import pytest

from splitbnn.experiment import (
    CSV_COLUMNS,
    ExperimentConfig,
    StageError,
    export_report,
    rows_from_csv,
    run_experiment,
    split_table_text,
)


@pytest.fixture(scope="module")
def cfg(tiny_mnist, tmp_path_factory):
    cache = tmp_path_factory.mktemp("cache")
    return ExperimentConfig(
        data=str(tiny_mnist), arch=(784, 64, 64, 10), capacities=(32,), retrain_capacities=(32,),
        bits=(1, 2, 6), epochs=2, retrain_epochs=1, val_size=50, calibration_size=100,
        cache_dir=str(cache), output_dir=str(tmp_path_factory.mktemp("runs")),
    )


@pytest.fixture(scope="module")
def bundle(cfg):
    return run_experiment(cfg)


def test_rows_and_modes(bundle):
    modes = {(r["mode"], r["bits"]) for r in bundle.rows}
    assert ("SA_1BIT-mapped", 1) in modes and ("SA_1BIT-retrained", 1) in modes
    assert ("IDEAL", 6) in modes  # full resolution of a 32-row tile
    assert {("ADC-linear", n) for n in (1, 2, 6)} <= modes
    assert {("ADC-lloyd-max", n) for n in (1, 2, 6)} <= modes
    sa = bundle.row(32, "SA_1BIT-mapped", 1)
    assert sa["saving_vs_4bit"] == 60.7


def test_split_table(bundle):
    assert bundle.split_table == {"32": ["-", 2, "-"]}
    text = split_table_text(bundle.split_table)
    assert "R=32" in text.splitlines()[0]


def test_full_resolution_adc_matches_ideal(bundle):
    ideal = bundle.row(32, "IDEAL", 6)["accuracy"]
    assert bundle.row(32, "ADC-linear", 6)["accuracy"] == ideal


def test_provenance(bundle, cfg):
    prov = bundle.provenance
    assert prov["config_hash"] == cfg.config_hash()
    assert prov["seed"] == 42
    assert prov["format_versions"] == {"model": 1, "report": 1}
    assert "cache_dir" not in prov["config"]


def test_rerun_is_byte_identical(bundle, cfg, tmp_path):
    csv1, json1 = export_report(bundle, tmp_path / "a")
    csv2, json2 = export_report(run_experiment(cfg), tmp_path / "b")
    assert csv1.read_bytes() == csv2.read_bytes()
    assert json1.read_bytes() == json2.read_bytes()


def test_csv_roundtrip(bundle):
    text = bundle.csv_text()
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    rows = rows_from_csv(text)
    assert rows == [{k: r[k] for k in CSV_COLUMNS} for r in bundle.rows]


def test_json_mirrors_csv(bundle):
    d = json.loads(bundle.dumps())
    assert [{k: r[k] for k in CSV_COLUMNS} for r in d["rows"]] == rows_from_csv(bundle.csv_text())


def test_config_json_roundtrip(cfg, tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_json()))
    back = ExperimentConfig.load(path)
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert ExperimentConfig(output_dir="elsewhere").config_hash() == ExperimentConfig().config_hash()
    assert ExperimentConfig(seed=1).config_hash() != ExperimentConfig().config_hash()


def test_unknown_config_field():
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_json({"colour": "blue"})


def test_stage_errors_name_the_stage(tmp_path):
    with pytest.raises(StageError, match="ingest"):
        run_experiment(ExperimentConfig(data=str(tmp_path)))


def test_unwritable_report(bundle, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StageError, match="export"):
        export_report(bundle, blocker / "sub")
