"""Acceptance criteria 1-9, each reported as one PASS/FAIL line.

Criteria 7-9 need the MNIST files (``$SPLITBNN_DATA`` or ./data) and train a
model on first use; trained weights are cached in ``.cache`` so later runs
only simulate.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from splitbnn import io
from splitbnn.bnn import BatchNormParams, fold_bn_to_thresholds, reference_forward
from splitbnn.experiment import ExperimentConfig, baseline_model, export_report, load_dataset, run_experiment
from splitbnn.models import CIFAR_CNN, MNIST_MLP, SMALL_CNN, random_cnn, random_mlp
from splitbnn.power import adc_power, calibrate_array_power, estimate, uniform_census
from splitbnn.quantizers import GRID_POINTS, kde_fit, linear_quantizer, lloyd_max, silverman_bandwidth
from splitbnn.reconstruct import plan_split, reconstruct_network
from splitbnn.xbar import ArrayConfig, plan_tiling, simulate

TABLE_I = {512: [None, 4, 4, None], 256: [None, 8, 8, None], 128: [None, 16, 16, None]}
TABLE_II = {
    512: [None, 3, 3, 6, 6, 9, 16, 2, None],
    256: [None, 6, 6, 9, 9, 18, 32, 4, None],
    128: [None, 9, 9, 18, 18, 36, 64, 8, None],
}
CACHE = Path(__file__).resolve().parent.parent / ".cache"


def test_criterion_1_block_counts(criterion):
    cells = matched = 0
    ends_ok = True
    for table, fanins in ((TABLE_I, list(MNIST_MLP[:-1])), (TABLE_II, CIFAR_CNN.fanins())):
        for R, expected in table.items():
            got = plan_split(fanins, R).block_counts()
            for e, g in zip(expected, got):
                if e is None:
                    ends_ok &= g is None
                else:
                    cells += 1
                    matched += e == g
    ok = matched == cells and ends_ok
    criterion(1, ok, f"{matched}/{cells} split cells reproduced, first/last layers unsplit: {ends_ok}")
    assert ok


def test_criterion_2_threshold_fold(criterion):
    rng = np.random.default_rng(2024)
    draws = 10_000
    mismatches, checked = 0, 0
    for k in (3, 16, 128):
        spread = max(1.0, math.sqrt(k))
        bn = BatchNormParams(
            b=rng.normal(0, spread, draws), mu=rng.normal(0, spread, draws),
            sigma=rng.uniform(0, 2 * spread, draws),
            gamma=np.where(rng.random(draws) < 0.02, 0.0, rng.normal(0, 1, draws)),
            beta=rng.normal(0, 1, draws),
            epsilon=float(10 ** rng.uniform(-8, -1)),
        )
        folded = fold_bn_to_thresholds(bn, k)
        p = np.arange(k + 1)[:, None]
        fires = folded.fires(np.broadcast_to(p, (k + 1, draws)))
        direct = bn.affine(2 * p - k) >= 0
        mismatches += int(np.sum(fires != direct))
        checked += fires.size
    ok = mismatches == 0
    criterion(2, ok, f"{mismatches} mismatches over {checked} (draw, sum) pairs, K in {{3, 16, 128}}")
    assert ok


def test_criterion_3_simulator_equivalence(criterion):
    rng = np.random.default_rng(3)
    failures = []
    mlp = random_mlp((784, 512, 512, 10), seed=11)
    cnn = random_cnn(SMALL_CNN, seed=12)
    cases = [("mlp", mlp, rng.integers(0, 256, (1000, 784), dtype=np.uint8), 128),
             ("cnn", cnn, rng.integers(0, 256, (1000, 12, 12, 1), dtype=np.uint8), 64)]
    for name, net, pixels, R in cases:
        ideal = ArrayConfig.for_capacity(R, output_mode="IDEAL")
        if not np.array_equal(simulate(plan_tiling(net, ideal), ideal, pixels).scores,
                              reference_forward(net, pixels).scores):
            failures.append(f"{name} IDEAL")
        recon = reconstruct_network(net, R)
        sa = ArrayConfig.for_capacity(R)
        if not np.array_equal(simulate(plan_tiling(recon, sa), sa, pixels).scores,
                              reference_forward(recon, pixels).scores):
            failures.append(f"{name} SA_1BIT")
    ok = not failures
    criterion(3, ok, "IDEAL and SA_1BIT bit-exact on 1000 inputs (MLP, CNN)" if ok
              else f"mismatch in {failures}")
    assert ok


def _gaussian_fixed_point(bits, iters=2000):
    levels = np.linspace(-2, 2, 2 ** bits)
    for _ in range(iters):
        b = np.concatenate(([-np.inf], (levels[:-1] + levels[1:]) / 2, [np.inf]))
        levels = (norm.pdf(b[:-1]) - norm.pdf(b[1:])) / (norm.cdf(b[1:]) - norm.cdf(b[:-1]))
    return levels


def test_criterion_4_lloyd_max(criterion):
    errors = {}
    a, b = -3.0, 5.0
    for bits in (1, 2, 3, 4):
        lm = lloyd_max(lambda x: np.full_like(x, 1 / (b - a)), (a, b), bits)
        errors[f"uniform {bits}b"] = float(np.max(np.abs(lm.levels - linear_quantizer(a, b, bits).levels)))
    one = lloyd_max(norm.pdf, (-10, 10), 1).levels
    errors["gauss 1b"] = float(np.max(np.abs(one - np.array([-1, 1]) * math.sqrt(2 / math.pi))))
    two = lloyd_max(norm.pdf, (-10, 10), 2).levels
    oracle = _gaussian_fixed_point(2)
    errors["gauss 2b"] = float(np.max(np.abs(two - oracle)))
    errors["oracle vs 0.4528/1.5104"] = float(np.max(np.abs(oracle - [-1.5104, -0.4528, 0.4528, 1.5104])))
    ok = (all(v <= 1e-6 for k, v in errors.items() if k.startswith("uniform"))
          and errors["gauss 1b"] <= 1e-3 and errors["gauss 2b"] <= 1e-3
          and errors["oracle vs 0.4528/1.5104"] <= 1e-4)
    worst_uniform = max(v for k, v in errors.items() if k.startswith("uniform"))
    criterion(4, ok, f"uniform max err {worst_uniform:.1e}; gaussian 1b {errors['gauss 1b']:.1e}, "
                     f"2b {errors['gauss 2b']:.1e}")
    assert ok


def test_criterion_5_kde(criterion):
    h = silverman_bandwidth(1.0, 100_000)
    rng = np.random.default_rng(5)
    kde = kde_fit(rng.normal(0, 1, 5000))
    lo, hi = kde.support
    x = np.linspace(lo, hi, GRID_POINTS)
    mass = integrate.simpson(kde.density(x), x=x)
    ok = abs(h - 0.106) < 1e-12 and abs(mass - 1) <= 1e-6
    criterion(5, ok, f"h = {h:.6f}, density integrates to 1 {mass - 1:+.1e}")
    assert ok


def test_criterion_6_power(criterion):
    s4 = round(100 * (1 - adc_power(1) / adc_power(4)), 1)
    s3 = round(100 * (1 - adc_power(1) / adc_power(3)), 1)
    report = estimate(uniform_census(100))
    overall4 = 100 * (1 - report.design.total / report.baselines[0].total)
    overall3 = 100 * (1 - report.design.total / report.baselines[1].total)
    ok = s4 == 93.3 and s3 == 85.7 and round(overall4, 1) == 60.7 and abs(overall3 - 39.9) <= 0.2
    criterion(6, ok, f"interface {s4}% / {s3}%; array cost {calibrate_array_power():.3f} gives "
                     f"{overall4:.2f}% vs 4-bit and predicts {overall3:.2f}% vs 3-bit")
    assert ok


# --- MNIST criteria ------------------------------------------------------

def acceptance_config(output_dir) -> ExperimentConfig:
    return ExperimentConfig(
        capacities=(256, 128), retrain_capacities=(256,), bits=(1, 2, 3, 4, 5, 6, 7, 8),
        quantizers=("linear", "lloyd-max"), cache_dir=str(CACHE), output_dir=str(output_dir),
    )


@pytest.fixture(scope="session")
def mnist_run(tmp_path_factory):
    try:
        io.ingest_mnist()
    except FileNotFoundError:
        pytest.skip("MNIST not found; set SPLITBNN_DATA")
    cfg = acceptance_config(tmp_path_factory.mktemp("acceptance"))
    start = time.process_time()
    bundle = run_experiment(cfg)
    return cfg, bundle, time.process_time() - start


def test_criterion_7_accuracy(criterion, mnist_run):
    cfg, bundle, _ = mnist_run
    _, _, meta, _ = baseline_model(cfg, load_dataset(cfg))
    minutes = meta["cpu_seconds"] / 60
    base = bundle.provenance["baseline_accuracy"]
    mapped = bundle.row(256, "SA_1BIT-mapped", 1)["accuracy"]
    retrained = bundle.row(256, "SA_1BIT-retrained", 1)["accuracy"]
    ok = base >= 0.97 and minutes <= 30 and base - mapped <= 0.015 and base - retrained <= 0.005
    criterion(7, ok, f"baseline {100 * base:.2f}% in {minutes:.1f} CPU-min; R=256 mapped drop "
                     f"{100 * (base - mapped):.2f}%, retrained drop {100 * (base - retrained):.2f}%")
    assert ok


def test_criterion_8_quantization_trend(criterion, mnist_run):
    _, bundle, _ = mnist_run
    acc = {kind: [bundle.row(128, f"ADC-{kind}", n)["accuracy"] for n in range(1, 9)]
           for kind in ("linear", "lloyd-max")}
    ideal = bundle.row(128, "IDEAL", 8)["accuracy"]
    monotone = {k: all(b >= a for a, b in zip(v, v[1:])) for k, v in acc.items()}
    loss1 = ideal - acc["linear"][0]
    lm_ge = all(acc["lloyd-max"][i] >= acc["linear"][i] for i in range(3))
    ok = all(monotone.values()) and loss1 >= 0.05 and lm_ge
    fmt = lambda v: "/".join(f"{100 * a:.1f}" for a in v)
    criterion(8, ok, f"linear {fmt(acc['linear'])}; lloyd-max {fmt(acc['lloyd-max'])}; "
                     f"1-bit loss {100 * loss1:.1f}%; monotone {monotone}; LM>=linear N<=3 {lm_ge}")
    assert ok


def test_criterion_9_determinism(criterion, mnist_run, tmp_path):
    cfg, bundle, _ = mnist_run
    csv1, json1 = export_report(bundle, tmp_path / "first")
    csv2, json2 = export_report(run_experiment(cfg), tmp_path / "second")
    ok = csv1.read_bytes() == csv2.read_bytes() and json1.read_bytes() == json2.read_bytes()
    criterion(9, ok, f"re-run of config {cfg.config_hash()} (seed {cfg.seed}) "
                     f"{'byte-identical' if ok else 'differs'}")
    assert ok
