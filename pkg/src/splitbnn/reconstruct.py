"""Input splitting: rewrite over-capacity layers as blocks plus a fixed merge.

A layer whose fan-in exceeds the array input capacity ``R`` is cut along its
(lowered) input dimension into ``n`` blocks.  Each block binarizes its own
weighted sum into a 1-bit intermediate neuron; the merge stage adds the ``n``
intermediates with weight +1 and fires when the sum is at least 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bnn import (
    BatchNormParams,
    BinaryTensor,
    ConvGeometry,
    LayerSpec,
    ThresholdVector,
    finish_layer,
    fold_bn_to_thresholds,
    layer_rows,
    xnor_popcount_matmul,
)

MERGE_WEIGHT = 1
MERGE_THRESHOLD = 0


class FrozenParameterError(AttributeError):
    """Raised on any attempt to modify a merge-stage constant."""


def choose_block_count(fanin: int, capacity: int) -> int:
    """Number of equal blocks needed to fit ``fanin`` inputs into arrays of ``capacity`` rows.

    Prefers the smallest divisor ``d`` of ``fanin`` with ``fanin / d <= capacity``
    as long as it stays below twice the ceiling count; otherwise falls back to
    ``ceil(fanin / capacity)`` blocks with a short (zero-padded) last block.
    """
    if fanin < 1 or capacity < 1:
        raise ValueError("fan-in and capacity must be positive")
    low = math.ceil(fanin / capacity)
    if low == 1:
        return 1
    for d in range(low, 2 * low):
        if fanin % d == 0:
            return d
    return low


@dataclass(frozen=True)
class LayerSplit:
    """How one layer's input indices are distributed over blocks."""

    layer: int
    fanin: int
    n: int
    block_size: int
    bounds: tuple[tuple[int, int], ...]
    padding: int = 0
    excluded: bool = False

    @property
    def block_sizes(self) -> list[int]:
        return [hi - lo for lo, hi in self.bounds]

    def to_json(self) -> dict:
        return {
            "layer": self.layer, "fanin": self.fanin, "n": self.n,
            "block_size": self.block_size, "bounds": [list(b) for b in self.bounds],
            "padding": self.padding, "excluded": self.excluded,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LayerSplit":
        return cls(d["layer"], d["fanin"], d["n"], d["block_size"],
                   tuple(tuple(b) for b in d["bounds"]), d["padding"], d["excluded"])


def split_bounds(fanin: int, n: int) -> tuple[int, tuple[tuple[int, int], ...], int]:
    size = math.ceil(fanin / n)
    bounds = tuple((i * size, min(fanin, (i + 1) * size)) for i in range(n))
    return size, bounds, size * n - fanin


def plan_layer_split(layer_index: int, fanin: int, capacity: int, excluded: bool = False) -> LayerSplit:
    n = 1 if excluded else choose_block_count(fanin, capacity)
    size, bounds, padding = split_bounds(fanin, n)
    return LayerSplit(layer_index, fanin, n, size, bounds, padding, excluded)


@dataclass(frozen=True)
class SplitPlan:
    capacity: int
    layers: tuple[LayerSplit, ...]

    def block_counts(self) -> list[int | None]:
        """Per-layer block count; None marks layers excluded from splitting."""
        return [None if s.excluded else s.n for s in self.layers]

    def to_json(self) -> dict:
        return {"capacity": self.capacity, "layers": [s.to_json() for s in self.layers]}


def plan_split(fanins: Sequence[int], capacity: int) -> SplitPlan:
    """Split plan for a layer chain; the first and last layers are never split."""
    last = len(fanins) - 1
    return SplitPlan(
        capacity,
        tuple(plan_layer_split(i, k, capacity, excluded=i in (0, last)) for i, k in enumerate(fanins)),
    )


def map_parameters(bn: BatchNormParams, n: int, scale_sigma: bool = True) -> list[BatchNormParams]:
    """Per-block batch-norm parameters for an ``n``-way split.

    b, mu, sigma and beta are divided by ``n``; gamma and epsilon are kept.
    With ``scale_sigma=False`` sigma is left unchanged instead, which keeps
    the per-block scaling factor equal to the baseline's so that the block
    thresholds add up to the baseline threshold (up to epsilon).
    """
    if n < 1:
        raise ValueError("block count must be at least 1")
    sigma = bn.sigma.astype(np.float64) / n if scale_sigma else bn.sigma
    return [
        BatchNormParams(
            b=bn.b.astype(np.float64) / n,
            mu=bn.mu.astype(np.float64) / n,
            sigma=sigma,
            gamma=bn.gamma,
            beta=bn.beta.astype(np.float64) / n,
            epsilon=bn.epsilon,
        )
        for _ in range(n)
    ]


@dataclass(eq=False)
class Block:
    start: int
    stop: int
    weights: BinaryTensor
    bn: BatchNormParams

    @property
    def fanin(self) -> int:
        return self.stop - self.start

    def thresholds(self) -> ThresholdVector:
        return fold_bn_to_thresholds(self.bn, self.fanin)


def merge_signs(intermediates: np.ndarray) -> np.ndarray:
    """Fixed merge stage: +1 iff the sum of the +-1 intermediates is >= 0."""
    total = intermediates.astype(np.int64).sum(axis=-1) * MERGE_WEIGHT
    return np.where(total >= MERGE_THRESHOLD, 1, -1).astype(np.int8)


def merge_popcount_threshold(n: int) -> int:
    """Popcount form of the merge: fires iff at least this many intermediates are +1."""
    return math.ceil(n / 2)


@dataclass(eq=False)
class SplitLayer:
    """A layer rewritten as ``n`` 1-bit blocks and a fixed +1/0 merge stage."""

    kind: str
    in_features: int
    out_features: int
    blocks: list[Block]
    conv: ConvGeometry | None = None
    name: str = ""
    init: str = "mapped"

    def __post_init__(self):
        covered = [i for blk in self.blocks for i in range(blk.start, blk.stop)]
        if covered != list(range(self.in_features)):
            raise ValueError(f"blocks of {self.name!r} do not partition the inputs")
        for blk in self.blocks:
            if blk.weights.shape != (blk.fanin, self.out_features):
                raise ValueError(f"block weights {blk.weights.shape} do not match its slice")
            if len(blk.bn) != self.out_features:
                raise ValueError("block batch-norm length must equal the output count")

    def __setattr__(self, key, value):
        if key in ("merge_weights", "merge_threshold"):
            raise FrozenParameterError(f"{key} is fixed by the reconstruction")
        super().__setattr__(key, value)

    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def merge_weights(self) -> np.ndarray:
        w = np.full(self.n, MERGE_WEIGHT, dtype=np.int8)
        w.flags.writeable = False
        return w

    @property
    def merge_threshold(self) -> int:
        return MERGE_THRESHOLD

    @property
    def fanin(self) -> int:
        return self.in_features

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.conv.in_h, self.conv.in_w, self.conv.cin)
        return (self.in_features,)

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.conv.pooled_h, self.conv.pooled_w, self.out_features)
        return (self.out_features,)

    @property
    def max_block_fanin(self) -> int:
        return max(blk.fanin for blk in self.blocks)

    def intermediates(self, rows: np.ndarray) -> np.ndarray:
        """(rows, out, n) +-1 block outputs for a (rows, K) +-1 operand."""
        out = np.empty((rows.shape[0], self.out_features, self.n), dtype=np.int8)
        for i, blk in enumerate(self.blocks):
            p = xnor_popcount_matmul(BinaryTensor.from_signs(rows[:, blk.start:blk.stop]), blk.weights)
            out[:, :, i] = np.where(blk.thresholds().fires(p), 1, -1)
        return out

    def forward_signs(self, x: np.ndarray) -> np.ndarray:
        rows = layer_rows(self, x, first=False)
        merged = merge_signs(self.intermediates(rows))
        return finish_layer(self, merged > 0, x.shape[0])

    def block_bounds(self) -> tuple[tuple[int, int], ...]:
        return tuple((blk.start, blk.stop) for blk in self.blocks)


def split_layer(layer: LayerSpec, n: int, mode: str = "mapped", scale_sigma: bool = True,
                seed: int = 0) -> SplitLayer:
    """Rewrite ``layer`` into ``n`` blocks.

    ``mapped`` slices the baseline weights by input index and maps the
    batch-norm parameters; ``fresh-init`` fills blocks with seeded random
    weights and neutral batch norm, to be overwritten by training.
    """
    if layer.bn is None:
        raise ValueError("the classifier layer cannot be split")
    _, bounds, _ = split_bounds(layer.in_features, n)
    signs = layer.weights.to_signs()
    if mode == "mapped":
        bns = map_parameters(layer.bn, n, scale_sigma)
    elif mode == "fresh-init":
        rng = np.random.default_rng(seed)
        signs = rng.choice(np.array([-1, 1], dtype=np.int8), size=signs.shape)
        m = layer.out_features
        bns = [BatchNormParams(np.zeros(m), np.zeros(m), np.ones(m), np.ones(m), np.zeros(m),
                               layer.bn.epsilon) for _ in range(n)]
    else:
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    blocks = [
        Block(lo, hi, BinaryTensor.from_signs(signs[lo:hi]), bn)
        for (lo, hi), bn in zip(bounds, bns)
    ]
    return SplitLayer(layer.kind, layer.in_features, layer.out_features, blocks,
                      layer.conv, layer.name, mode)


def reconstruct_network(network: Sequence[LayerSpec], capacity: int, mode: str = "mapped",
                        scale_sigma: bool = True, seed: int = 0) -> list:
    """Split every hidden layer whose fan-in exceeds ``capacity``.

    The first (pixel) and last (classifier) layers pass through unchanged.
    """
    plan = plan_split([layer.in_features for layer in network], capacity)
    out = []
    for layer, split in zip(network, plan.layers):
        if split.excluded or split.n == 1:
            out.append(layer)
        else:
            out.append(split_layer(layer, split.n, mode, scale_sigma, seed + split.layer))
    return out


def block_counts(network: Sequence) -> list[int | None]:
    """Block count per layer of a (possibly reconstructed) network; None for the exempt ends."""
    last = len(network) - 1
    return [None if i in (0, last) else getattr(layer, "n", 1) for i, layer in enumerate(network)]
