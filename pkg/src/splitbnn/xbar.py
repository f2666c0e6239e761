"""Crossbar compilation and digital-equivalent simulation.

A network is tiled onto arrays of fixed size.  Each array holds a
contiguous slice of a layer's input rows and output columns and reads its
columns out in one of three ways:

* ``SA_1BIT``: a sense amplifier compares the column sum with the folded
  threshold and emits one bit (only valid when the whole fan-in, or a whole
  split block, sits on the array);
* ``ADC``: an N-bit converter digitizes the partial sum, which is mapped to a
  quantizer reconstruction level and accumulated digitally;
* ``IDEAL``: a full-resolution converter returns the exact partial sum.

The first and last layers are exempt: their partial sums are accumulated
exactly in every mode and they never enter the converter census.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bnn import (
    PIXEL_SCALE,
    BinaryTensor,
    finish_layer,
    layer_rows,
    pack_bits,
    popcount_matmul_words,
    signed_pixels,
)
from .quantizers import QuantizerSpec, fit_quantizer, kde_fit_counts, linear_quantizer, lloyd_max
from .reconstruct import SplitLayer, choose_block_count, merge_signs, split_bounds

OUTPUT_MODES = ("SA_1BIT", "ADC", "IDEAL")
CELL_MODES = ("A", "B")


class PlanningError(ValueError):
    """The network cannot be placed on arrays under the requested readout."""


class TraceOverflowError(RuntimeError):
    pass


def full_resolution_bits(rows: int) -> int:
    """Converter bits needed to resolve every partial sum of ``rows`` +-1 products.

    A column of K cells takes K + 1 distinct values (2P - K for P = 0..K).
    """
    return max(1, math.ceil(math.log2(rows + 1)))


@dataclass(frozen=True)
class ArrayConfig:
    """Physical array size, cell mapping and column readout.

    Mode ``A`` stores a weight in two columns and drives one word line per
    input; mode ``B`` stores it in two rows (differential input pair) and
    reads one column per output.
    """

    rows: int = 128
    cols: int = 128
    cell_mode: str = "A"
    output_mode: str = "SA_1BIT"
    adc_bits: int = 8
    quantizer: str = "linear"
    trace: bool = False
    trace_limit: int = 1 << 24
    trace_overflow: str = "error"

    def __post_init__(self):
        if self.cell_mode not in CELL_MODES:
            raise ValueError(f"cell mode must be one of {CELL_MODES}")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"output mode must be one of {OUTPUT_MODES}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array dimensions must be positive")
        if self.cell_mode == "B" and self.rows < 2:
            raise ValueError("mode B needs at least two rows")
        if self.cell_mode == "A" and self.cols < 2:
            raise ValueError("mode A needs at least two columns")
        if self.output_mode == "ADC" and self.adc_bits < 1:
            raise ValueError("ADC needs at least one bit")
        if self.trace_overflow not in ("error", "truncate"):
            raise ValueError("trace_overflow must be 'error' or 'truncate'")

    @classmethod
    def for_capacity(cls, capacity: int, cell_mode: str = "A", cols: int | None = None, **kw) -> "ArrayConfig":
        """Config whose input capacity is ``capacity`` rows of inputs."""
        rows = capacity if cell_mode == "A" else 2 * capacity
        return cls(rows=rows, cols=cols if cols is not None else capacity, cell_mode=cell_mode, **kw)

    @property
    def capacity(self) -> int:
        return self.rows if self.cell_mode == "A" else self.rows // 2

    @property
    def outputs_per_array(self) -> int:
        return self.cols // 2 if self.cell_mode == "A" else self.cols

    def to_json(self) -> dict:
        return {
            "rows": self.rows, "cols": self.cols, "cell_mode": self.cell_mode,
            "output_mode": self.output_mode, "adc_bits": self.adc_bits,
            "quantizer": self.quantizer, "capacity": self.capacity,
            "outputs_per_array": self.outputs_per_array,
        }


@dataclass(frozen=True)
class ArrayAssignment:
    array_id: int
    layer: int
    tile: int
    rows: tuple[int, int]
    cols: tuple[int, int]
    role: str  # exempt | whole | partial | block

    def to_json(self) -> dict:
        return {
            "array": self.array_id, "layer": self.layer, "tile": self.tile,
            "rows": list(self.rows), "cols": list(self.cols), "role": self.role,
        }


@dataclass(frozen=True)
class LayerTiling:
    layer: int
    name: str
    role: str
    row_bounds: tuple[tuple[int, int], ...]
    col_bounds: tuple[tuple[int, int], ...]

    @property
    def arrays(self) -> int:
        return len(self.row_bounds) * len(self.col_bounds)


@dataclass(eq=False)
class TilePlan:
    network: list
    config: ArrayConfig
    layers: list[LayerTiling]
    assignments: list[ArrayAssignment]

    @property
    def array_count(self) -> int:
        return len(self.assignments)

    def arrays_per_layer(self) -> list[int]:
        return [lt.arrays for lt in self.layers]

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "layers": [
                {"layer": lt.layer, "name": lt.name, "role": lt.role,
                 "row_bounds": [list(b) for b in lt.row_bounds],
                 "col_bounds": [list(b) for b in lt.col_bounds], "arrays": lt.arrays}
                for lt in self.layers
            ],
            "assignments": [a.to_json() for a in self.assignments],
            "census": count_interfaces(self, self.config).to_json(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _column_bounds(m: int, per_array: int) -> tuple[tuple[int, int], ...]:
    return tuple((lo, min(m, lo + per_array)) for lo in range(0, m, per_array))


def plan_tiling(network: Sequence, cfg: ArrayConfig) -> TilePlan:
    """Place every layer on arrays; deterministic in network order."""
    capacity = cfg.capacity
    last = len(network) - 1
    layers, assignments = [], []
    for i, layer in enumerate(network):
        name = layer.name or f"layer{i + 1}"
        if isinstance(layer, SplitLayer):
            if layer.max_block_fanin > capacity:
                raise PlanningError(
                    f"layer {name!r}: split block of {layer.max_block_fanin} inputs exceeds "
                    f"array capacity {capacity}"
                )
            role, rows = "block", layer.block_bounds()
        elif i in (0, last):
            n = choose_block_count(layer.in_features, capacity)
            role, rows = "exempt", split_bounds(layer.in_features, n)[1]
        elif layer.in_features <= capacity:
            role, rows = "whole", ((0, layer.in_features),)
        elif cfg.output_mode == "SA_1BIT":
            raise PlanningError(
                f"layer {name!r}: fan-in {layer.in_features} exceeds array capacity {capacity}; "
                "1-bit sense amplifiers need a reconstructed (split) network"
            )
        else:
            n = choose_block_count(layer.in_features, capacity)
            role, rows = "partial", split_bounds(layer.in_features, n)[1]
        cols = _column_bounds(layer.out_features, cfg.outputs_per_array)
        lt = LayerTiling(i, name, role, tuple(rows), cols)
        layers.append(lt)
        for t, rb in enumerate(lt.row_bounds):
            for cb in lt.col_bounds:
                assignments.append(ArrayAssignment(len(assignments), i, t, rb, cb, role))
    return TilePlan(list(network), cfg, layers, assignments)


@dataclass
class InterfaceCensus:
    """Converters attached to the arrays of a plan.

    Exempt (first/last layer) arrays are listed separately and excluded from
    the converter totals.
    """

    arrays: int
    exempt_arrays: int
    sa_count: int
    adc_count: int
    adc_bits: int
    array_bits: list[int] = field(default_factory=list)
    per_array_sa: list[int] = field(default_factory=list)
    per_array_adc: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "arrays": self.arrays, "exempt_arrays": self.exempt_arrays,
            "sa_count": self.sa_count, "adc_count": self.adc_count, "adc_bits": self.adc_bits,
            "array_bits": self.array_bits, "per_array_sa": self.per_array_sa,
            "per_array_adc": self.per_array_adc,
        }

    @classmethod
    def from_json(cls, d: dict) -> "InterfaceCensus":
        return cls(**d)

    def scaled(self, factor: int) -> "InterfaceCensus":
        return InterfaceCensus(
            self.arrays * factor, self.exempt_arrays * factor, self.sa_count * factor,
            self.adc_count * factor, self.adc_bits, self.array_bits * factor,
            self.per_array_sa * factor, self.per_array_adc * factor,
        )


def count_interfaces(plan: TilePlan, cfg: ArrayConfig | None = None) -> InterfaceCensus:
    """Per-array converter census; ``array_bits`` holds each array's readout resolution."""
    cfg = cfg or plan.config
    exempt = sa = adc = 0
    bits_seen = 0
    array_bits, per_sa, per_adc = [], [], []
    for a in plan.assignments:
        outputs = a.cols[1] - a.cols[0]
        if a.role == "exempt":
            exempt += 1
            continue
        if a.role == "partial":
            k = a.rows[1] - a.rows[0]
            bits = full_resolution_bits(k) if cfg.output_mode == "IDEAL" else cfg.adc_bits
            adc += outputs
            bits_seen = max(bits_seen, bits)
            array_bits.append(bits)
            per_sa.append(0)
            per_adc.append(outputs)
        else:
            sa += outputs
            array_bits.append(1)
            per_sa.append(outputs)
            per_adc.append(0)
    return InterfaceCensus(len(array_bits), exempt, sa, adc, bits_seen, array_bits, per_sa, per_adc)


@dataclass
class SimResult:
    scores: np.ndarray
    traces: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)


class _Tracer:
    def __init__(self, cfg: ArrayConfig):
        self.enabled = cfg.trace
        self.limit = cfg.trace_limit
        self.overflow = cfg.trace_overflow
        self.used = 0
        self.records: list[tuple[int, np.ndarray]] = []

    def record(self, array_id: int, p: np.ndarray):
        if not self.enabled:
            return
        if self.used + p.size > self.limit:
            if self.overflow == "error":
                raise TraceOverflowError(f"trace buffer of {self.limit} values exhausted")
            return
        self.used += p.size
        self.records.append((array_id, p.copy()))


def _tile_weights(layer, lt: LayerTiling, t: int, rb) -> np.ndarray:
    """(M, words) packed weights of one row tile, all columns."""
    if isinstance(layer, SplitLayer):
        w = layer.blocks[t].weights
    else:
        w = BinaryTensor.from_signs(layer.weights.to_signs()[rb[0]:rb[1]])
    return w.transpose().data


def _run_tiles(layer, lt: LayerTiling, rows: np.ndarray, first: bool, tracer: _Tracer,
               array_ids: dict) -> list[np.ndarray]:
    """Per-row-tile popcount matrices (rows, M), accumulated over column tiles."""
    out = []
    signs = None if first else rows
    for t, rb in enumerate(lt.row_bounds):
        k = rb[1] - rb[0]
        if first:
            w = layer.weights.to_signs()[rb[0]:rb[1]].astype(np.float64)
            s = np.rint(rows[:, rb[0]:rb[1]].astype(np.float64) @ w).astype(np.int64)
            p_tile = (s + PIXEL_SCALE * k) // 2
        else:
            x_words = pack_bits(signs[:, rb[0]:rb[1]] > 0)
            p_tile = popcount_matmul_words(x_words, _tile_weights(layer, lt, t, rb), k)
        if tracer.enabled:
            for cb in lt.col_bounds:
                tracer.record(array_ids[(lt.layer, t, cb)], p_tile[:, cb[0]:cb[1]])
        out.append(p_tile)
    return out


def _tile_fanin(rb, first: bool) -> int:
    return (rb[1] - rb[0]) * (PIXEL_SCALE if first else 1)


def simulate(plan: TilePlan, cfg: ArrayConfig | None, pixels,
             quantizers: dict | None = None, partial_sum_sink: dict | None = None) -> SimResult:
    """Run a batch through the tiled network.

    ``quantizers`` maps ``(layer, tile)`` to a :class:`QuantizerSpec` for ADC
    readout; linear quantizers are derived on demand when absent.  When
    ``partial_sum_sink`` is given, histograms of every partial-role tile's
    signed partial sums are accumulated into it (keyed ``(layer, tile)``).
    """
    cfg = cfg or plan.config
    if cfg.capacity != plan.config.capacity or cfg.outputs_per_array != plan.config.outputs_per_array:
        raise PlanningError("plan was compiled for a different array geometry")
    network = plan.network
    quantizers = quantizers if quantizers is not None else {}
    tracer = _Tracer(cfg)
    array_ids = {(a.layer, a.tile, a.cols): a.array_id for a in plan.assignments}
    x = signed_pixels(pixels)
    batch = x.shape[0]
    x = x.reshape((batch,) + tuple(network[0].input_shape))
    last = len(network) - 1
    for lt in plan.layers:
        layer = network[lt.layer]
        first = lt.layer == 0
        rows = layer_rows(layer, x, first)
        tiles = _run_tiles(layer, lt, rows, first, tracer, array_ids)
        if lt.role == "block":
            inter = np.stack(
                [np.where(blk.thresholds().fires(p), 1, -1).astype(np.int8)
                 for blk, p in zip(layer.blocks, tiles)],
                axis=-1,
            )
            fired = merge_signs(inter) > 0
        else:
            k_eff = layer.in_features * (PIXEL_SCALE if first else 1)
            if lt.layer == last:
                p = np.sum(tiles, axis=0)
                return SimResult((2 * p - k_eff).reshape(batch, -1), tracer.records)
            thresholds = layer.thresholds(PIXEL_SCALE if first else 1)
            if lt.role == "partial":
                fired = _partial_readout(lt, tiles, thresholds, cfg, quantizers, partial_sum_sink)
            else:
                fired = thresholds.fires(np.sum(tiles, axis=0))
        x = finish_layer(layer, fired, batch)
    raise PlanningError("network has no classifier layer")


def _partial_readout(lt: LayerTiling, tiles, thresholds, cfg: ArrayConfig, quantizers: dict,
                     sink: dict | None) -> np.ndarray:
    if sink is not None:
        for t, (rb, p) in enumerate(zip(lt.row_bounds, tiles)):
            k = rb[1] - rb[0]
            counts = np.bincount((2 * p).ravel(), minlength=2 * k + 1)  # index s + K
            key = (lt.layer, t)
            sink[key] = sink[key] + counts if key in sink else counts
    if cfg.output_mode == "IDEAL":
        return thresholds.fires(np.sum(tiles, axis=0))
    total = np.zeros(tiles[0].shape, dtype=np.float64)
    for t, (rb, p) in enumerate(zip(lt.row_bounds, tiles)):
        k = rb[1] - rb[0]
        s = 2 * p - k
        if cfg.adc_bits >= full_resolution_bits(k):
            total += s
            continue
        spec = quantizers.get((lt.layer, t))
        if spec is None:
            if cfg.quantizer != "linear":
                raise PlanningError(f"no {cfg.quantizer} quantizer fitted for layer {lt.layer} tile {t}")
            spec = linear_quantizer(-k, k, cfg.adc_bits)
        elif spec.bits != cfg.adc_bits:
            raise PlanningError(f"quantizer for layer {lt.layer} tile {t} has {spec.bits} bits, ADC has {cfg.adc_bits}")
        total += spec.quantize(s)
    return thresholds.fires_real(total)


def collect_partial_sums(plan: TilePlan, pixels, batch_size: int = 1000) -> dict:
    """Histograms of exact partial sums per (layer, tile), indexed by ``s + K``."""
    ideal = ArrayConfig(**{**_config_kwargs(plan.config), "output_mode": "IDEAL", "trace": False})
    sink: dict = {}
    for lo in range(0, len(pixels), batch_size):
        simulate(plan, ideal, pixels[lo:lo + batch_size], partial_sum_sink=sink)
    return sink


def _config_kwargs(cfg: ArrayConfig) -> dict:
    return {
        "rows": cfg.rows, "cols": cfg.cols, "cell_mode": cfg.cell_mode,
        "output_mode": cfg.output_mode, "adc_bits": cfg.adc_bits, "quantizer": cfg.quantizer,
        "trace": cfg.trace, "trace_limit": cfg.trace_limit, "trace_overflow": cfg.trace_overflow,
    }


def fit_partial_sum_quantizers(plan: TilePlan, kind: str, bits: int, histograms: dict | None = None,
                               calibration_pixels=None) -> dict:
    """One quantizer per (layer, tile) of every partial-role layer.

    ``lloyd-max`` needs partial-sum histograms, collected from
    ``calibration_pixels`` when not supplied.
    """
    specs = {}
    if kind == "lloyd-max" and histograms is None:
        if calibration_pixels is None:
            raise ValueError("Lloyd-Max fitting needs calibration data or histograms")
        histograms = collect_partial_sums(plan, calibration_pixels)
    for lt in plan.layers:
        if lt.role != "partial":
            continue
        for t, rb in enumerate(lt.row_bounds):
            k = rb[1] - rb[0]
            if kind == "linear":
                specs[(lt.layer, t)] = fit_quantizer("linear", bits, k)
            elif kind == "lloyd-max":
                counts = histograms[(lt.layer, t)]
                kde = kde_fit_counts(np.arange(-k, k + 1), counts)
                specs[(lt.layer, t)] = lloyd_max(kde.density, kde.support, bits)
            else:
                raise ValueError(f"unknown quantizer kind {kind!r}")
    return specs


def quantizers_to_json(specs: dict) -> list[dict]:
    return [{"layer": k[0], "tile": k[1], **v.to_json()} for k, v in sorted(specs.items())]


def quantizers_from_json(items: list[dict]) -> dict:
    return {(d["layer"], d["tile"]): QuantizerSpec.from_json(d) for d in items}


def simulate_batched(plan: TilePlan, cfg: ArrayConfig | None, pixels, quantizers: dict | None = None,
                     batch_size: int = 1000) -> np.ndarray:
    """Scores for a large input set, evaluated in fixed-size slices."""
    parts = [simulate(plan, cfg, pixels[lo:lo + batch_size], quantizers).scores
             for lo in range(0, len(pixels), batch_size)]
    return np.concatenate(parts)
