"""End-to-end experiment: train, split, retrain, simulate and price.

Trained and retrained models are cached by a hash of everything that
determines them, so re-running a configuration reuses the same weights and
reproduces its report byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .models import DESK_MLP
from .power import PowerConfig, estimate
from .reconstruct import block_counts, reconstruct_network
from .trainer import TrainConfig, evaluate, retrain_split, train_baseline, write_log
from .xbar import (
    ArrayConfig,
    collect_partial_sums,
    count_interfaces,
    fit_partial_sum_quantizers,
    plan_tiling,
    simulate_batched,
)

log = logging.getLogger(__name__)

REPORT_VERSION = 1
CSV_COLUMNS = ("model", "R", "mode", "bits", "accuracy", "arrays", "interface_power",
               "total_power", "saving_vs_4bit", "saving_vs_3bit")


class StageError(RuntimeError):
    """An experiment stage failed; the message names the stage."""


@dataclass(frozen=True)
class ExperimentConfig:
    data: str | None = None
    model: str = "mnist-mlp"
    arch: tuple[int, ...] = DESK_MLP
    capacities: tuple[int, ...] = (512, 256, 128)
    cell_mode: str = "A"
    modes: tuple[str, ...] = ("SA_1BIT", "IDEAL", "ADC")
    bits: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    quantizers: tuple[str, ...] = ("linear", "lloyd-max")
    split_mode: str = "mapped"
    retrain_capacities: tuple[int, ...] = (512, 256, 128)
    epochs: int = 20
    retrain_epochs: int = 10
    retrain_lr: float = 1e-4
    batch_size: int = 100
    lr: float = 1e-3
    lr_decay: float = 0.9
    val_size: int = 5000
    calibration_size: int = 10_000
    test_size: int | None = None
    seed: int = 42
    cache_dir: str = ".cache"
    output_dir: str = "runs"

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        tuples = {"arch", "capacities", "modes", "bits", "quantizers", "retrain_capacities"}
        return cls(**{k: tuple(v) if k in tuples else v for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def config_hash(self) -> str:
        """Hash of the fields that affect results (paths excluded)."""
        d = self.to_json()
        for k in ("data", "cache_dir", "output_dir"):
            d.pop(k)
        return _digest(d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           lr_decay=self.lr_decay, seed=self.seed, val_size=self.val_size)

    def retrain_config(self) -> TrainConfig:
        return replace(self.train_config(), epochs=self.retrain_epochs, lr=self.retrain_lr)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ReportBundle:
    config: ExperimentConfig
    rows: list[dict]
    split_table: dict
    power: dict
    provenance: dict
    training: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"provenance": self.provenance, "rows": self.rows, "split_table": self.split_table,
                "power": self.power, "training": self.training}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    def csv_text(self) -> str:
        buf = _io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row[k]) for k in CSV_COLUMNS})
        return buf.getvalue()

    def row(self, R: int, mode: str, bits: int) -> dict:
        for r in self.rows:
            if r["R"] == R and r["mode"] == mode and r["bits"] == bits:
                return r
        raise KeyError((R, mode, bits))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def rows_from_csv(text: str) -> list[dict]:
    """Parse a report CSV back into typed rows."""
    out = []
    for r in csv.DictReader(_io.StringIO(text)):
        out.append({
            "model": r["model"], "R": int(r["R"]), "mode": r["mode"], "bits": int(r["bits"]),
            **{k: float(r[k]) for k in ("accuracy", "interface_power", "total_power",
                                         "saving_vs_4bit", "saving_vs_3bit")},
            "arrays": int(r["arrays"]),
        })
    return out


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(f"stage {name!r} failed: {exc}") from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


@_stage("ingest")
def load_dataset(cfg: ExperimentConfig) -> io.Dataset:
    if cfg.model != "mnist-mlp":
        raise ValueError(f"unknown model {cfg.model!r}")
    data = io.ingest_mnist(cfg.data)
    return data.subset(test=cfg.test_size)


def _cached(cache: Path, key: str, build):
    """Load ``cache/key`` if present, else build, save and return it."""
    base = cache / key
    if (base.with_name(key + ".json")).exists():
        net, meta = io.load_model(base)
        shadow = np.load(base.with_name(key + ".shadow.npz"))
        return net, [shadow[f"w{i}"] for i in range(len(shadow.files))], meta
    net, shadow, meta = build()
    io.save_model(net, base, meta)
    np.savez(base.with_name(key + ".shadow.npz"), **{f"w{i}": w for i, w in enumerate(shadow)})
    write_log(meta["history"], base.with_name(key + ".log.csv"))
    return net, shadow, meta


@_stage("train")
def baseline_model(cfg: ExperimentConfig, data: io.Dataset):
    tcfg = cfg.train_config()
    key = "baseline-" + _digest({"arch": list(cfg.arch), "train": tcfg.to_json(),
                                 "data": data.digests, "format": io.FORMAT_VERSION})

    def build():
        log.info("training baseline %s (seed %d)", cfg.arch, tcfg.seed)
        res = train_baseline(cfg.arch, data.train_x, data.train_y, tcfg)
        meta = {"train_config": tcfg.to_json(), "history": res.history, "best_epoch": res.best_epoch,
                "cpu_seconds": round(res.seconds, 1)}
        return res.model.export(), res.model.shadow_weights(), meta

    return _cached(Path(cfg.cache_dir), key, build) + (key,)


@_stage("retrain")
def retrained_model(cfg: ExperimentConfig, data: io.Dataset, base_key: str, recon, shadow, R: int):
    tcfg = cfg.retrain_config()
    key = "retrain-" + _digest({"base": base_key, "R": R, "mode": cfg.split_mode, "train": tcfg.to_json()})

    def build():
        log.info("retraining split network at R=%d", R)
        res = retrain_split(recon, data.train_x, data.train_y, tcfg,
                            shadow=shadow if cfg.split_mode == "mapped" else None)
        meta = {"train_config": tcfg.to_json(), "history": res.history, "best_epoch": res.best_epoch,
                "cpu_seconds": round(res.seconds, 1)}
        return res.model.export(), res.model.shadow_weights(), meta

    return _cached(Path(cfg.cache_dir), key, build)


def _power_columns(census, pcfg: PowerConfig) -> dict:
    rep = estimate(census, pcfg)
    return {
        "arrays": census.arrays,
        "interface_power": round(rep.design.interface_power, 6),
        "total_power": round(rep.design.total, 6),
        "saving_vs_4bit": rep.saving_vs(4),
        "saving_vs_3bit": rep.saving_vs(3),
    }


def _accuracy(plan, acfg, data, quantizers=None) -> float:
    scores = simulate_batched(plan, acfg, data.test_x, quantizers)
    return round(float(np.mean(scores.argmax(1) == data.test_y)), 6)


@_stage("simulate")
def sweep_capacity(cfg: ExperimentConfig, data: io.Dataset, net, recon, retrained, R: int,
                   pcfg: PowerConfig) -> list[dict]:
    rows = []

    def add(mode, bits, acc, census):
        rows.append({"model": cfg.model, "R": R, "mode": mode, "bits": bits, "accuracy": acc,
                     **_power_columns(census, pcfg)})

    if "SA_1BIT" in cfg.modes:
        sa = ArrayConfig.for_capacity(R, cfg.cell_mode)
        for label, network in (("SA_1BIT-mapped", recon), ("SA_1BIT-retrained", retrained)):
            if network is None:
                continue
            plan = plan_tiling(network, sa)
            add(label, 1, _accuracy(plan, sa, data), count_interfaces(plan))
    if "IDEAL" in cfg.modes:
        ideal = ArrayConfig.for_capacity(R, cfg.cell_mode, output_mode="IDEAL")
        plan = plan_tiling(net, ideal)
        census = count_interfaces(plan)
        add("IDEAL", census.adc_bits or 1, _accuracy(plan, ideal, data), census)
    if "ADC" in cfg.modes:
        calib = data.train_x[:cfg.calibration_size]
        hist = None
        for kind in cfg.quantizers:
            for n in cfg.bits:
                acfg = ArrayConfig.for_capacity(R, cfg.cell_mode, output_mode="ADC", adc_bits=n, quantizer=kind)
                plan = plan_tiling(net, acfg)
                if kind == "lloyd-max" and hist is None:
                    hist = collect_partial_sums(plan, calib)
                quant = fit_partial_sum_quantizers(plan, kind, n, histograms=hist)
                add(f"ADC-{kind}", n, _accuracy(plan, acfg, data, quant), count_interfaces(plan, acfg))
    return rows


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    """Train (or load) the baseline, then sweep every capacity and readout."""
    log.info("config %s, seed %d", cfg.config_hash(), cfg.seed)
    data = load_dataset(cfg)
    net, shadow, meta, base_key = baseline_model(cfg, data)
    pcfg = PowerConfig()
    baseline_acc = round(evaluate(net, data.test_x, data.test_y).accuracy, 6)
    rows, split_table, power, training = [], {}, {}, {"baseline": meta["history"]}
    for R in cfg.capacities:
        recon = _stage("reconstruct")(reconstruct_network)(net, R, mode=cfg.split_mode, seed=cfg.seed)
        split_table[str(R)] = ["-" if n is None else n for n in block_counts(recon)]
        retrained = None
        if R in cfg.retrain_capacities and cfg.retrain_epochs > 0:
            retrained, _, rmeta = retrained_model(cfg, data, base_key, recon, shadow, R)
            training[f"retrain_R{R}"] = rmeta["history"]
        rows += sweep_capacity(cfg, data, net, recon, retrained, R, pcfg)
        census = count_interfaces(plan_tiling(recon, ArrayConfig.for_capacity(R, cfg.cell_mode)))
        power[str(R)] = estimate(census, pcfg).to_json()
    provenance = {
        "config": {k: v for k, v in cfg.to_json().items() if k not in ("data", "cache_dir", "output_dir")},
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "format_versions": {"model": io.FORMAT_VERSION, "report": REPORT_VERSION},
        "data_digests": data.digests,
        "baseline_model": base_key,
        "baseline_accuracy": baseline_acc,
        "test_samples": int(len(data.test_y)),
    }
    return ReportBundle(cfg, rows, split_table, power, provenance, training)


def export_report(bundle: ReportBundle, out_dir=None) -> tuple[Path, Path]:
    """Write ``report-<hash>.csv`` and ``.json``; returns both paths."""
    out = Path(out_dir or bundle.config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        stem = out / f"report-{bundle.provenance['config_hash']}"
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        csv_path.write_text(bundle.csv_text())
        json_path.write_text(bundle.dumps())
    except OSError as exc:
        raise StageError(f"stage 'export' failed: cannot write report to {out}: {exc}") from exc
    return csv_path, json_path


def split_table_text(tables: dict, names: list[str] | None = None) -> str:
    """Block counts per layer (rows) and capacity (columns); '-' marks unsplit ends."""
    caps = list(tables)
    depth = len(next(iter(tables.values()))) if tables else 0
    names = names or [f"layer {i + 1}" for i in range(depth)]
    head = ["layer"] + [f"R={c}" for c in caps]
    body = [[names[i]] + [str(tables[c][i]) for c in caps] for i in range(depth)]
    widths = [max(len(r[j]) for r in [head, *body]) for j in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [head, *body]) + "\n"
