"""Bit-packed binary tensors, XNOR-popcount products and the reference engine.

Activations and weights take values in {-1, +1}; bit 1 encodes +1 and bit 0
encodes -1.  Every hidden layer is evaluated in the popcount domain: with
``P`` matching positions out of ``K`` the signed sum is ``s = 2P - K``.
The first layer sees 8-bit pixels mapped onto the odd integer grid
``q = 2p - 255`` (real value ``q / 255`` in [-1, 1]) and is computed in plain
integer arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

WORD_BITS = 64
PIXEL_SCALE = 255
DEFAULT_EPS = 1e-5

# cap on the (rows x cols x words) scratch block used by the popcount kernel
_CHUNK_ELEMS = 1 << 22


class ShapeError(ValueError):
    """Operand shapes or layer geometry do not line up."""


def _words_for(n: int) -> int:
    return (n + WORD_BITS - 1) // WORD_BITS


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a 0/1 array along its last axis into little-endian uint64 words.

    Each row is padded with zero bits up to a whole number of words.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    n = bits.shape[-1]
    words = _words_for(n)
    pad = words * WORD_BITS - n
    if pad:
        widths = [(0, 0)] * (bits.ndim - 1) + [(0, pad)]
        bits = np.pad(bits, widths)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def unpack_bits(data: np.ndarray, n: int) -> np.ndarray:
    raw = np.ascontiguousarray(data.astype("<u8", copy=False)).view(np.uint8)
    return np.unpackbits(raw, axis=-1, count=n, bitorder="little")


@dataclass(frozen=True, eq=False)
class BinaryTensor:
    """A {-1, +1} tensor stored one bit per element.

    Packing runs along the last axis; every row owns
    ``ceil(shape[-1] / 64)`` words and the tail bits of the final word are
    zero.
    """

    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        if not shape:
            raise ShapeError("BinaryTensor needs at least one dimension")
        expected = shape[:-1] + (_words_for(shape[-1]),)
        if self.data.shape != expected or self.data.dtype != np.uint64:
            raise ShapeError(
                f"packed data {self.data.dtype}{self.data.shape} does not match "
                f"shape {shape} (expected uint64{expected})"
            )
        tail = self.data.shape[-1] * WORD_BITS - shape[-1]
        if tail and self.data.size:
            mask = np.uint64((1 << (WORD_BITS - tail)) - 1)
            if np.any(self.data[..., -1] & ~mask):
                raise ShapeError("tail padding bits must be zero")

    @classmethod
    def from_signs(cls, values) -> "BinaryTensor":
        values = np.asarray(values)
        if values.size and not np.all((values == 1) | (values == -1)):
            raise ValueError("binary tensors hold only -1 and +1")
        return cls(values.shape, pack_bits(values > 0))

    @classmethod
    def from_bits(cls, bits) -> "BinaryTensor":
        bits = np.asarray(bits)
        return cls(bits.shape, pack_bits(bits != 0))

    def to_bits(self) -> np.ndarray:
        return unpack_bits(self.data, self.shape[-1])

    def to_signs(self) -> np.ndarray:
        return self.to_bits().astype(np.int8) * 2 - 1

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def row_length(self) -> int:
        return self.shape[-1]

    def transpose(self) -> "BinaryTensor":
        if len(self.shape) != 2:
            raise ShapeError("transpose is defined for matrices only")
        return BinaryTensor.from_bits(self.to_bits().T)

    def equals(self, other: "BinaryTensor") -> bool:
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __eq__(self, other):
        if not isinstance(other, BinaryTensor):
            return NotImplemented
        return self.equals(other)

    __hash__ = None


def popcount_matmul_words(x_words: np.ndarray, w_words: np.ndarray, k: int) -> np.ndarray:
    """Count matching bits between every row of ``x_words`` and of ``w_words``.

    Both operands are packed along the reduction axis: ``x_words`` is
    (rows, words) and ``w_words`` is (cols, words).  Tail bits must be zero in
    both, so they xor to zero and never count.
    """
    rows, words = x_words.shape
    cols = w_words.shape[0]
    if w_words.shape[1] != words:
        raise ShapeError(f"packed widths differ: {words} vs {w_words.shape[1]}")
    out = np.empty((rows, cols), dtype=np.int64)
    step = max(1, _CHUNK_ELEMS // max(1, cols * words))
    for lo in range(0, rows, step):
        hi = min(rows, lo + step)
        diff = np.bitwise_xor(x_words[lo:hi, None, :], w_words[None, :, :])
        out[lo:hi] = k - np.bitwise_count(diff).sum(axis=-1, dtype=np.int64)
    return out


def xnor_popcount_matmul(inputs: BinaryTensor, weights: BinaryTensor) -> np.ndarray:
    """Popcount of XNOR between each input row and each weight column.

    ``inputs`` is (batch, K) and ``weights`` is (K, M).  The result ``P`` is
    (batch, M); the signed dot product is ``2 * P - K``.
    """
    if len(inputs.shape) != 2 or len(weights.shape) != 2:
        raise ShapeError("xnor_popcount_matmul expects two matrices")
    k = inputs.shape[1]
    if weights.shape[0] != k:
        raise ShapeError(
            f"inner dimensions disagree: inputs {inputs.shape} x weights {weights.shape}"
        )
    w_cols = weights.transpose()
    return popcount_matmul_words(inputs.data, w_cols.data, k)


@dataclass(eq=False)
class BatchNormParams:
    """Per-neuron bias and batch-norm statistics of one layer.

    Arrays are held as float32, the precision the model file stores.
    ``sigma`` is the running standard deviation, not the variance.
    """

    b: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        names = ("b", "mu", "sigma", "gamma", "beta")
        for name in names:
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float32))
            setattr(self, name, arr)
        lengths = {len(getattr(self, n)) for n in names}
        if len(lengths) != 1:
            raise ShapeError(f"batch-norm arrays have differing lengths {sorted(lengths)}")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be non-negative")
        self.epsilon = float(self.epsilon)
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def __len__(self) -> int:
        return len(self.b)

    def affine(self, x) -> np.ndarray:
        """Shift-and-scale a weighted sum ``x`` (float64)."""
        x = np.asarray(x, dtype=np.float64)
        den = np.sqrt(self.sigma.astype(np.float64) ** 2 + self.epsilon)
        return (
            self.gamma.astype(np.float64) * ((x + self.b) - self.mu.astype(np.float64)) / den
            + self.beta
        )

    def slice(self, cols: slice) -> "BatchNormParams":
        return BatchNormParams(
            self.b[cols], self.mu[cols], self.sigma[cols], self.gamma[cols],
            self.beta[cols], self.epsilon,
        )

    def equals(self, other: "BatchNormParams") -> bool:
        return self.epsilon == other.epsilon and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("b", "mu", "sigma", "gamma", "beta")
        )


@dataclass(eq=False)
class ThresholdVector:
    """Folded batch-norm + sign activation for a layer's neurons.

    A neuron fires (+1) iff ``P >= T`` when ``geq`` is set and iff ``P <= T``
    otherwise.  ``fanin`` is the popcount-domain fan-in, which for the pixel
    layer is ``PIXEL_SCALE`` times the number of inputs.  ``tau`` keeps the
    real-valued threshold on the signed sum (in units of the integer sum) for
    readouts that accumulate non-integer partial sums.
    """

    thresholds: np.ndarray
    geq: np.ndarray
    fanin: int
    tau: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.int64)
        self.geq = np.asarray(self.geq, dtype=bool)
        self.tau = np.asarray(self.tau, dtype=np.float64)
        self.fanin = int(self.fanin)

    def __len__(self) -> int:
        return len(self.thresholds)

    def fires(self, popcounts) -> np.ndarray:
        p = np.asarray(popcounts)
        return np.where(self.geq, p >= self.thresholds, p <= self.thresholds)

    def fires_real(self, sums) -> np.ndarray:
        """Threshold test on real-valued accumulated signed sums."""
        s = np.asarray(sums, dtype=np.float64)
        return np.where(self.geq, s >= self.tau, s <= self.tau)

    def slice(self, cols: slice) -> "ThresholdVector":
        return ThresholdVector(
            self.thresholds[cols], self.geq[cols], self.fanin, self.tau[cols]
        )

    def equals(self, other: "ThresholdVector") -> bool:
        return (
            self.fanin == other.fanin
            and np.array_equal(self.thresholds, other.thresholds)
            and np.array_equal(self.geq, other.geq)
            and np.array_equal(self.tau, other.tau)
        )


def fold_bn_to_thresholds(bn: BatchNormParams, fanin: int, input_scale: int = 1) -> ThresholdVector:
    """Fold bias, batch norm and sign into integer popcount thresholds.

    The layer sees ``x = s / input_scale`` where ``s`` is the integer signed
    sum over ``fanin`` inputs each bounded by ``input_scale``.  Thresholds are
    exact: no floating-point comparison is needed at inference time.  Values
    outside ``[0, K]`` are kept (saturated to ``-1`` / ``K + 1``) so that
    constant neurons stay constant.
    """
    if fanin < 1:
        raise ValueError("fan-in must be at least 1")
    k_eff = int(fanin) * int(input_scale)
    gamma = bn.gamma.astype(np.float64)
    beta = bn.beta.astype(np.float64)
    den = np.sqrt(bn.sigma.astype(np.float64) ** 2 + bn.epsilon)
    const = gamma == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = (bn.mu.astype(np.float64) - bn.b) - beta * den / np.where(const, 1.0, gamma)
    tau = tau * input_scale
    geq = gamma >= 0
    # gamma == 0: y == beta, constant sign(beta) with sign(0) = +1
    tau = np.where(const, np.where(beta >= 0, -np.inf, np.inf), tau)
    half = (tau + k_eff) / 2.0
    with np.errstate(invalid="ignore", over="ignore"):
        raw = np.where(geq, np.ceil(half), np.floor(half))
    t = np.clip(raw, -1, k_eff + 1).astype(np.int64)
    return ThresholdVector(t, geq, k_eff, tau)


def binarize(p: int, threshold: int, geq: bool = True) -> int:
    """Single-neuron threshold test; a sum exactly at threshold gives +1."""
    if geq:
        return 1 if p >= threshold else -1
    return 1 if p <= threshold else -1


@dataclass(frozen=True)
class ConvGeometry:
    in_h: int
    in_w: int
    cin: int
    fh: int
    fw: int
    stride: int = 1
    padding: int = 0
    pool: int = 1

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.padding - self.fh) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.padding - self.fw) // self.stride + 1

    @property
    def pooled_h(self) -> int:
        return self.out_h // self.pool

    @property
    def pooled_w(self) -> int:
        return self.out_w // self.pool

    @property
    def patch_size(self) -> int:
        return self.fh * self.fw * self.cin

    def validate(self):
        if min(self.in_h, self.in_w, self.cin, self.fh, self.fw, self.stride, self.pool) < 1:
            raise ShapeError(f"non-positive conv geometry {self}")
        if self.padding < 0 or self.out_h < 1 or self.out_w < 1:
            raise ShapeError(f"filter does not fit input: {self}")
        if (self.in_h + 2 * self.padding - self.fh) % self.stride or (
            self.in_w + 2 * self.padding - self.fw
        ) % self.stride:
            raise ShapeError(f"stride {self.stride} does not tile the padded input: {self}")
        if self.pool > 1 and (self.out_h % self.pool or self.out_w % self.pool):
            raise ShapeError(f"pool {self.pool} does not divide {self.out_h}x{self.out_w}")


@dataclass(eq=False)
class LayerSpec:
    """One dense or convolutional BNN layer.

    ``weights`` is the lowered (K, M) matrix; for conv layers K runs over
    (dy, dx, channel) with the channel index fastest.  ``bn`` is None for the
    classifier layer, which emits raw integer scores.
    """

    kind: str
    in_features: int
    out_features: int
    weights: BinaryTensor
    bn: BatchNormParams | None = None
    conv: ConvGeometry | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.weights.shape != (self.in_features, self.out_features):
            raise ShapeError(
                f"layer {self.name or self.kind}: weights {self.weights.shape} != "
                f"({self.in_features}, {self.out_features})"
            )
        if self.kind == "conv":
            if self.conv is None:
                raise ShapeError("conv layer needs its geometry")
            self.conv.validate()
            if self.conv.patch_size != self.in_features:
                raise ShapeError(
                    f"conv patch {self.conv.fh}x{self.conv.fw}x{self.conv.cin} != "
                    f"fan-in {self.in_features}"
                )
        if self.bn is not None and len(self.bn) != self.out_features:
            raise ShapeError("batch-norm length must equal the output count")

    @property
    def fanin(self) -> int:
        return self.in_features

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.conv.pooled_h, self.conv.pooled_w, self.out_features)
        return (self.out_features,)

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.conv.in_h, self.conv.in_w, self.conv.cin)
        return (self.in_features,)

    def thresholds(self, input_scale: int = 1) -> ThresholdVector:
        if self.bn is None:
            raise ValueError(f"layer {self.name!r} has no batch norm (classifier layer)")
        return fold_bn_to_thresholds(self.bn, self.in_features, input_scale)


def signed_pixels(pixels) -> np.ndarray:
    """Map 8-bit pixels onto the odd integer grid ``2p - 255``."""
    p = np.asarray(pixels)
    if p.dtype != np.uint8:
        if np.any((p < 0) | (p > 255)) or np.any(p != np.round(p)):
            raise ValueError("pixels must be integers in [0, 255]")
    return p.astype(np.int32) * 2 - PIXEL_SCALE


def unsigned_pixels(signed) -> np.ndarray:
    """Inverse of :func:`signed_pixels`."""
    s = np.asarray(signed, dtype=np.int32)
    if np.any((s + PIXEL_SCALE) % 2):
        raise ValueError("signed pixels lie on the odd grid only")
    return ((s + PIXEL_SCALE) // 2).astype(np.uint8)


def lower_filters(filters) -> BinaryTensor:
    """Lower (fh, fw, cin, cout) +-1 filters to the (fh*fw*cin, cout) matrix."""
    filters = np.asarray(filters)
    if filters.ndim != 4:
        raise ShapeError("filters must be (fh, fw, cin, cout)")
    fh, fw, cin, cout = filters.shape
    return BinaryTensor.from_signs(filters.reshape(fh * fw * cin, cout))


def im2col(fmap: np.ndarray, geom: ConvGeometry, pad_value: int = -1) -> np.ndarray:
    """Extract (batch * out_h * out_w, fh * fw * cin) patches from NHWC maps."""
    fmap = np.asarray(fmap)
    if fmap.ndim != 4 or fmap.shape[1:] != (geom.in_h, geom.in_w, geom.cin):
        raise ShapeError(
            f"feature map {fmap.shape[1:]} does not match geometry "
            f"{(geom.in_h, geom.in_w, geom.cin)}"
        )
    p = geom.padding
    if p:
        fmap = np.pad(fmap, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(fmap, (geom.fh, geom.fw), axis=(1, 2))
    win = win[:, :: geom.stride, :: geom.stride]
    # (B, oh, ow, C, fh, fw) -> (B, oh, ow, fh, fw, C)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(-1, geom.patch_size)


def lower_conv(layer: LayerSpec, fmap, pad_value: int = -1) -> tuple[np.ndarray, BinaryTensor]:
    """Return the patch matrix and lowered weights of a conv layer.

    Padding uses ``pad_value``: -1 for binary maps, ``-PIXEL_SCALE`` for the
    pixel layer, i.e. the encoding of -1 in either domain.
    """
    if layer.kind != "conv":
        raise ShapeError("lower_conv needs a conv layer")
    return im2col(fmap, layer.conv, pad_value), layer.weights


def maxpool_signs(x: np.ndarray, pool: int) -> np.ndarray:
    """Non-overlapping max pooling of NHWC +-1 maps."""
    if pool == 1:
        return x
    b, h, w, c = x.shape
    return x.reshape(b, h // pool, pool, w // pool, pool, c).max(axis=(2, 4))


def layer_rows(layer: LayerSpec, x: np.ndarray, first: bool) -> np.ndarray:
    """Arrange a layer's input as a (rows, K) operand matrix."""
    batch = x.shape[0]
    if layer.kind == "conv":
        pad_value = -PIXEL_SCALE if first else -1
        return im2col(x.reshape((batch,) + layer.input_shape), layer.conv, pad_value)
    rows = x.reshape(batch, -1)
    if rows.shape[1] != layer.in_features:
        raise ShapeError(
            f"layer {layer.name!r} expects {layer.in_features} inputs, got {rows.shape[1]}"
        )
    return rows


def integer_popcounts(rows: np.ndarray, weights: BinaryTensor, input_scale: int) -> np.ndarray:
    """Popcount-domain sums for integer (multi-bit) input rows.

    ``P = (s + input_scale * K) / 2`` where ``s`` is the exact integer dot
    product with the +-1 weights.
    """
    k = weights.shape[0]
    w = weights.to_signs().astype(np.float64)
    s = np.rint(rows.astype(np.float64) @ w).astype(np.int64)
    return (s + input_scale * k) // 2


def layer_popcounts(layer: LayerSpec, rows: np.ndarray, first: bool) -> np.ndarray:
    if first:
        return integer_popcounts(rows, layer.weights, PIXEL_SCALE)
    return xnor_popcount_matmul(BinaryTensor.from_signs(rows), layer.weights)


def finish_layer(layer: LayerSpec, fired: np.ndarray, batch: int) -> np.ndarray:
    """Turn per-row firing decisions into the layer's +-1 output tensor."""
    out = np.where(fired, 1, -1).astype(np.int8)
    if layer.kind == "conv":
        g = layer.conv
        out = out.reshape(batch, g.out_h, g.out_w, layer.out_features)
        out = maxpool_signs(out, g.pool)
    return out


@dataclass
class ForwardResult:
    scores: np.ndarray
    activations: list[BinaryTensor] = field(default_factory=list)

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)


def _check_chain(network: Sequence) -> None:
    if not network:
        raise ShapeError("empty network")
    for i, (a, b) in enumerate(zip(network, network[1:])):
        if math.prod(a.output_shape) != math.prod(b.input_shape):
            raise ShapeError(
                f"layer {i} emits {a.output_shape} but layer {i + 1} expects {b.input_shape}"
            )
    if network[-1].bn is not None:
        raise ShapeError("the last layer must be a classifier layer without batch norm")
    for i, layer in enumerate(network[:-1]):
        if getattr(layer, "bn", True) is None:
            raise ShapeError(f"hidden layer {i} lacks batch-norm parameters")


def reference_forward(network: Sequence, pixels, keep_activations: bool = True) -> ForwardResult:
    """Integer-exact software inference; ground truth for every crossbar mode.

    Layers exposing ``forward_signs`` (split layers) are delegated to; plain
    :class:`LayerSpec` layers are evaluated here.  The final layer returns its
    signed integer sums as class scores.
    """
    _check_chain(network)
    x = signed_pixels(pixels)
    batch = x.shape[0]
    x = x.reshape((batch,) + tuple(network[0].input_shape))
    activations = []
    last = len(network) - 1
    for i, layer in enumerate(network):
        first = i == 0
        if hasattr(layer, "forward_signs"):
            x = layer.forward_signs(x)
        else:
            rows = layer_rows(layer, x, first)
            p = layer_popcounts(layer, rows, first)
            k_eff = layer.in_features * (PIXEL_SCALE if first else 1)
            if i == last:
                scores = 2 * p - k_eff
                return ForwardResult(scores.reshape(batch, -1), activations)
            x = finish_layer(layer, layer.thresholds(PIXEL_SCALE if first else 1).fires(p), batch)
        if keep_activations:
            flat = x.reshape(batch, -1)
            activations.append(BinaryTensor.from_signs(flat))
    raise ShapeError("network has no classifier layer")
