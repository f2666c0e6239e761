"""Architecture declarations and randomly initialized reference networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bnn import BatchNormParams, BinaryTensor, ConvGeometry, LayerSpec

# hidden widths of the MNIST MLP used in the published split tables
MNIST_MLP = (784, 2048, 2048, 2048, 10)
# desk-scale MLP trained by the acceptance suite
DESK_MLP = (784, 1024, 1024, 10)


@dataclass(frozen=True)
class ConvStage:
    cout: int
    kernel: int = 3
    padding: int = 1
    stride: int = 1
    pool: int = 1


@dataclass(frozen=True)
class CnnArch:
    in_h: int
    in_w: int
    cin: int
    convs: tuple[ConvStage, ...]
    dense: tuple[int, ...]

    def fanins(self) -> list[int]:
        out, cin = [], self.cin
        h, w = self.in_h, self.in_w
        for st in self.convs:
            out.append(st.kernel * st.kernel * cin)
            h = ((h + 2 * st.padding - st.kernel) // st.stride + 1) // st.pool
            w = ((w + 2 * st.padding - st.kernel) // st.stride + 1) // st.pool
            cin = st.cout
        flat = h * w * cin
        for m in self.dense:
            out.append(flat)
            flat = m
        return out


# CIFAR-10 CNN of the published split table: 9 layers, fan-ins 27 ... 1024
CIFAR_CNN = CnnArch(
    32, 32, 3,
    (
        ConvStage(128), ConvStage(128, pool=2),
        ConvStage(256), ConvStage(256, pool=2),
        ConvStage(512), ConvStage(512, pool=2),
    ),
    (1024, 1024, 10),
)

# small CNN for fast equivalence tests; its hidden fan-ins exceed 64-128 rows
SMALL_CNN = CnnArch(
    12, 12, 1,
    (ConvStage(8, pool=2), ConvStage(16, pool=2)),
    (32, 10),
)


def random_bn(rng: np.random.Generator, m: int, fanin: int) -> BatchNormParams:
    """Batch norm whose thresholds land inside the achievable sum range."""
    spread = np.sqrt(fanin)
    return BatchNormParams(
        b=np.zeros(m),
        mu=rng.normal(0, spread / 4, m),
        sigma=np.abs(rng.normal(spread, spread / 4, m)) + 1,
        gamma=rng.choice([-1.0, 1.0], m) * rng.uniform(0.5, 1.5, m),
        beta=rng.normal(0, 0.3, m),
    )


def _weights(rng, k, m) -> BinaryTensor:
    return BinaryTensor.from_signs(rng.choice(np.array([-1, 1], dtype=np.int8), size=(k, m)))


def random_mlp(sizes=DESK_MLP, seed: int = 0) -> list[LayerSpec]:
    rng = np.random.default_rng(seed)
    layers = []
    last = len(sizes) - 2
    for i, (k, m) in enumerate(zip(sizes, sizes[1:])):
        bn = None if i == last else random_bn(rng, m, k)
        layers.append(LayerSpec("dense", k, m, _weights(rng, k, m), bn, name=f"fc{i + 1}"))
    return layers


def random_cnn(arch: CnnArch = SMALL_CNN, seed: int = 0) -> list[LayerSpec]:
    rng = np.random.default_rng(seed)
    layers = []
    h, w, cin = arch.in_h, arch.in_w, arch.cin
    for i, st in enumerate(arch.convs):
        geom = ConvGeometry(h, w, cin, st.kernel, st.kernel, st.stride, st.padding, st.pool)
        k = geom.patch_size
        layers.append(LayerSpec("conv", k, st.cout, _weights(rng, k, st.cout),
                                random_bn(rng, st.cout, k), geom, name=f"conv{i + 1}"))
        h, w, cin = geom.pooled_h, geom.pooled_w, st.cout
    flat = h * w * cin
    for j, m in enumerate(arch.dense):
        last = j == len(arch.dense) - 1
        bn = None if last else random_bn(rng, m, flat)
        layers.append(LayerSpec("dense", flat, m, _weights(rng, flat, m), bn,
                                name=f"fc{j + 1}"))
        flat = m
    return layers
