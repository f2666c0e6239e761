"""Command-line entry point: ``splitbnn <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .experiment import ExperimentConfig, export_report, run_experiment, split_table_text
from .models import DESK_MLP, MNIST_MLP, CIFAR_CNN
from .power import estimate
from .reconstruct import block_counts, plan_split, reconstruct_network
from .trainer import TrainConfig, evaluate, train_baseline, write_log
from .xbar import (
    ArrayConfig,
    PlanningError,
    collect_partial_sums,
    count_interfaces,
    fit_partial_sum_quantizers,
    plan_tiling,
    simulate_batched,
)

ARCHS = {"desk-mlp": DESK_MLP, "mnist-mlp": MNIST_MLP}


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.replace(",", " ").split())


def cmd_train(args) -> int:
    data = io.ingest_mnist(args.data)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                      val_size=args.val_size)
    print(f"seed {cfg.seed}")
    res = train_baseline(_ints(args.arch), data.train_x, data.train_y, cfg)
    net = res.model.export()
    acc = evaluate(net, data.test_x, data.test_y).accuracy
    io.save_model(net, args.out, {"train_config": cfg.to_json(), "history": res.history,
                                  "test_accuracy": acc})
    write_log(res.history, Path(args.out).with_suffix(".log.csv"))
    print(f"test accuracy {acc:.4f} (best epoch {res.best_epoch}); saved {args.out}.json/.bin")
    return 0


def cmd_reconstruct(args) -> int:
    net, meta = io.load_model(args.model)
    recon = reconstruct_network(net, args.R, mode=args.mode, scale_sigma=not args.keep_sigma,
                                seed=args.seed)
    io.save_model(recon, args.out, {**meta, "reconstruction": {"R": args.R, "mode": args.mode}})
    print("block counts:", ["-" if n is None else n for n in block_counts(recon)])
    return 0


def cmd_simulate(args) -> int:
    net, _ = io.load_model(args.model)
    data = io.ingest_mnist(args.data).subset(test=args.test_size)
    cfg = ArrayConfig.for_capacity(args.R, args.cell_mode, output_mode=args.output_mode,
                                   adc_bits=args.bits, quantizer=args.quantizer)
    try:
        plan = plan_tiling(net, cfg)
    except PlanningError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    quant = None
    if args.output_mode == "ADC":
        hist = collect_partial_sums(plan, data.train_x[:args.calibration_size]) if args.quantizer == "lloyd-max" else None
        quant = fit_partial_sum_quantizers(plan, args.quantizer, args.bits, histograms=hist)
    scores = simulate_batched(plan, cfg, data.test_x, quant)
    acc = float(np.mean(scores.argmax(1) == data.test_y))
    census = count_interfaces(plan, cfg)
    print(f"accuracy {acc:.4f}  arrays {census.arrays} (+{census.exempt_arrays} exempt)  "
          f"SAs {census.sa_count}  ADCs {census.adc_count} x {census.adc_bits} bits")
    if args.plan_out:
        Path(args.plan_out).write_text(plan.dumps() + "\n")
    return 0


def _experiment_config(args) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config).to_json() if args.config else {}
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = list(v) if isinstance(v, tuple) else v
    return ExperimentConfig.from_json(base)


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args)
    print(f"config {cfg.config_hash()}  seed {cfg.seed}")
    bundle = run_experiment(cfg)
    csv_path, json_path = export_report(bundle)
    print(bundle.csv_text(), end="")
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_power(args) -> int:
    if args.model:
        net, _ = io.load_model(args.model)
        census = count_interfaces(plan_tiling(net, ArrayConfig.for_capacity(args.R, args.cell_mode)))
    else:
        net = reconstruct_network(_random_arch(args.arch), args.R)
        census = count_interfaces(plan_tiling(net, ArrayConfig.for_capacity(args.R, args.cell_mode)))
    report = estimate(census)
    print(report.table(), end="")
    if args.json:
        Path(args.json).write_text(report.dumps() + "\n")
    return 0


def _random_arch(name: str):
    from .models import random_mlp

    return random_mlp(ARCHS[name], seed=0)


def cmd_report(args) -> int:
    if args.arch == "cifar-cnn":
        fanins, names = CIFAR_CNN.fanins(), [f"layer {i + 1}" for i in range(len(CIFAR_CNN.fanins()))]
    else:
        sizes = ARCHS[args.arch]
        fanins, names = list(sizes[:-1]), [f"layer {i + 1}" for i in range(len(sizes) - 1)]
    tables = {str(R): ["-" if n is None else n for n in plan_split(fanins, R).block_counts()]
              for R in _ints(args.capacities)}
    print(split_table_text(tables, names), end="")
    if args.results:
        bundle = json.loads(Path(args.results).read_text())
        for row in bundle["rows"]:
            print(f"R={row['R']:<4} {row['mode']:<18} {row['bits']:>2} bits  acc {row['accuracy']:.4f}  "
                  f"saving vs 4-bit {row['saving_vs_4bit']:.1f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitbnn", description="BNN crossbar mapping, simulation and power.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train the baseline MLP on MNIST")
    t.add_argument("--data", help="dataset root (default $SPLITBNN_DATA or ./data)")
    t.add_argument("--arch", default=" ".join(map(str, DESK_MLP)))
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=100)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--val-size", type=int, default=5000)
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--out", required=True, help="model path stem")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("reconstruct", help="split a trained model for a given array capacity")
    r.add_argument("--model", required=True)
    r.add_argument("--R", type=int, required=True)
    r.add_argument("--mode", choices=("mapped", "fresh-init"), default="mapped")
    r.add_argument("--keep-sigma", action="store_true", help="do not scale sigma by 1/n")
    r.add_argument("--seed", type=int, default=42)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("simulate", help="run the test set through the crossbar model")
    s.add_argument("--model", required=True)
    s.add_argument("--data")
    s.add_argument("--R", type=int, default=128)
    s.add_argument("--cell-mode", choices=("A", "B"), default="A")
    s.add_argument("--output-mode", choices=("SA_1BIT", "ADC", "IDEAL"), default="SA_1BIT")
    s.add_argument("--bits", type=int, default=8)
    s.add_argument("--quantizer", choices=("linear", "lloyd-max"), default="linear")
    s.add_argument("--calibration-size", type=int, default=10_000)
    s.add_argument("--test-size", type=int)
    s.add_argument("--plan-out", help="write the tile plan as JSON")
    s.set_defaults(fn=cmd_simulate)

    w = sub.add_parser("sweep", help="full experiment; writes CSV and JSON reports")
    w.add_argument("--config", help="ExperimentConfig JSON file")
    w.add_argument("--data")
    w.add_argument("--capacities", type=_ints)
    w.add_argument("--cell-mode", dest="cell_mode", choices=("A", "B"))
    w.add_argument("--modes", type=_words)
    w.add_argument("--bits", type=_ints)
    w.add_argument("--quantizers", type=_words)
    w.add_argument("--retrain-capacities", dest="retrain_capacities", type=_ints)
    w.add_argument("--epochs", type=int)
    w.add_argument("--retrain-epochs", dest="retrain_epochs", type=int)
    w.add_argument("--test-size", dest="test_size", type=int)
    w.add_argument("--seed", type=int)
    w.add_argument("--cache-dir", dest="cache_dir")
    w.add_argument("--output-dir", dest="output_dir")
    w.set_defaults(fn=cmd_sweep)

    pw = sub.add_parser("power", help="power table for a split network's arrays")
    pw.add_argument("--model", help="split model; default is a random network of --arch")
    pw.add_argument("--arch", choices=sorted(ARCHS), default="desk-mlp")
    pw.add_argument("--R", type=int, default=128)
    pw.add_argument("--cell-mode", choices=("A", "B"), default="A")
    pw.add_argument("--json")
    pw.set_defaults(fn=cmd_power)

    rp = sub.add_parser("report", help="split-count table, optionally with sweep results")
    rp.add_argument("--arch", choices=sorted(ARCHS) + ["cifar-cnn"], default="mnist-mlp")
    rp.add_argument("--capacities", default="512 256 128")
    rp.add_argument("--results", help="report JSON written by sweep")
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
