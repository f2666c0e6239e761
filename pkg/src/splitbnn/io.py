"""Dataset readers and the on-disk model format.

A model is a JSON manifest plus a little-endian binary payload.  Weight
blobs hold the packed uint64 words of each (K, M) matrix row by row; batch
norm arrays are float32.  The manifest records every blob's offset and
length, a cache of the folded thresholds and the split layout.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bnn import PIXEL_SCALE, BatchNormParams, BinaryTensor, ConvGeometry, LayerSpec
from .reconstruct import Block, SplitLayer

FORMAT_NAME = "splitbnn-model"
FORMAT_VERSION = 1
DATA_ENV = "SPLITBNN_DATA"

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = ("test_batch.bin",)


class FormatError(ValueError):
    pass


def data_root(path=None) -> Path:
    """Explicit path, else ``$SPLITBNN_DATA``, else ``./data``."""
    return Path(path or os.environ.get(DATA_ENV, "data"))


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    digests: dict

    def subset(self, train: int | None = None, test: int | None = None) -> "Dataset":
        return Dataset(self.train_x[:train], self.train_y[:train], self.test_x[:test],
                       self.test_y[:test], self.digests)


def _read_bytes(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(f"{path} (or {gz.name}) not found")


def parse_idx(raw: bytes, magic: int, name: str = "idx") -> np.ndarray:
    """Decode an IDX byte string whose magic must equal ``magic``."""
    if len(raw) < 8:
        raise FormatError(f"{name}: offset 0: header truncated ({len(raw)} bytes)")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise FormatError(f"{name}: offset 0: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{name}: offset 4: dimension table truncated")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    need = header + int(np.prod(dims))
    if len(raw) != need:
        raise FormatError(
            f"{name}: offset {min(len(raw), need)}: payload has {len(raw) - header} bytes, "
            f"dimensions {dims} need {need - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def ingest_mnist(path=None) -> Dataset:
    """Load the four MNIST IDX files (plain or ``.gz``) with SHA-256 digests."""
    root = data_root(path)
    if (root / "mnist").is_dir():
        root = root / "mnist"
    parts, digests = {}, {}
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        raw_img = _read_bytes(root / img_name)
        raw_lbl = _read_bytes(root / lbl_name)
        digests[img_name] = hashlib.sha256(raw_img).hexdigest()
        digests[lbl_name] = hashlib.sha256(raw_lbl).hexdigest()
        images = parse_idx(raw_img, IDX_IMAGES, img_name)
        labels = parse_idx(raw_lbl, IDX_LABELS, lbl_name)
        if images.ndim != 3 or labels.ndim != 1:
            raise FormatError(f"{split}: unexpected IDX ranks {images.ndim}/{labels.ndim}")
        if len(images) != len(labels):
            raise FormatError(f"{split}: {len(images)} images but {len(labels)} labels")
        if labels.max(initial=0) > 9:
            raise FormatError(f"{split}: label {labels.max()} out of range")
        parts[split] = (images.reshape(len(images), -1), labels.astype(np.int64))
    return Dataset(*parts["train"], *parts["test"], digests)


def parse_cifar_batch(raw: bytes, name: str = "batch") -> tuple[np.ndarray, np.ndarray]:
    """Records of one label byte plus R, G, B planes; returns NHWC images."""
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{name}: {len(raw)} bytes is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{name}: offset {bad[0] * CIFAR_RECORD}: label {labels[bad[0]]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def ingest_cifar10(path=None) -> Dataset:
    root = data_root(path)
    for sub in ("cifar-10-batches-bin", "cifar10"):
        if (root / sub).is_dir():
            root = root / sub
            break
    digests, out = {}, []
    for names in (CIFAR_TRAIN, CIFAR_TEST):
        xs, ys = [], []
        for name in names:
            raw = _read_bytes(root / name)
            digests[name] = hashlib.sha256(raw).hexdigest()
            x, y = parse_cifar_batch(raw, name)
            xs.append(x)
            ys.append(y)
        out += [np.concatenate(xs), np.concatenate(ys)]
    return Dataset(*out, digests)


# --- model file -----------------------------------------------------------

_BN_FIELDS = ("b", "mu", "sigma", "gamma", "beta")


class _Payload:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.size = 0

    def add(self, data: bytes) -> dict:
        ref = {"offset": self.size, "length": len(data)}
        self.chunks.append(data)
        self.size += len(data)
        return ref


def _weights_entry(w: BinaryTensor, payload: _Payload) -> dict:
    return {"shape": list(w.shape), "words_per_row": int(w.data.shape[-1]),
            **payload.add(w.data.astype("<u8").tobytes())}


def _bn_entry(bn: BatchNormParams, payload: _Payload) -> dict:
    entry = {"epsilon": bn.epsilon, "length": len(bn)}
    for f in _BN_FIELDS:
        entry[f] = payload.add(getattr(bn, f).astype("<f4").tobytes())
    return entry


def _threshold_cache(bn: BatchNormParams, fanin: int, scale: int) -> dict:
    from .bnn import fold_bn_to_thresholds

    t = fold_bn_to_thresholds(bn, fanin, scale)
    return {"input_scale": scale, "thresholds": t.thresholds.tolist(), "geq": t.geq.tolist()}


def _layer_entry(i: int, layer, payload: _Payload) -> dict:
    scale = PIXEL_SCALE if i == 0 else 1
    entry = {
        "kind": layer.kind, "name": layer.name, "in_features": layer.in_features,
        "out_features": layer.out_features,
        "conv": asdict(layer.conv) if layer.conv is not None else None,
    }
    if isinstance(layer, SplitLayer):
        entry["type"] = "split"
        entry["init"] = layer.init
        entry["merge"] = {"weight": int(layer.merge_weights[0]), "threshold": layer.merge_threshold}
        entry["blocks"] = [
            {"start": b.start, "stop": b.stop, "weights": _weights_entry(b.weights, payload),
             "bn": _bn_entry(b.bn, payload), "threshold_cache": _threshold_cache(b.bn, b.fanin, 1)}
            for b in layer.blocks
        ]
    else:
        entry["type"] = "layer"
        entry["weights"] = _weights_entry(layer.weights, payload)
        entry["bn"] = _bn_entry(layer.bn, payload) if layer.bn is not None else None
        entry["threshold_cache"] = (
            _threshold_cache(layer.bn, layer.in_features, scale) if layer.bn is not None else None
        )
    return entry


def save_model(network: Sequence, path, metadata: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.bin``; returns both paths."""
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    payload = _Payload()
    layers = [_layer_entry(i, layer, payload) for i, layer in enumerate(network)]
    blob = b"".join(payload.chunks)
    manifest = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION, "byte_order": "little",
        "layers": layers,
        "payload": {"file": base.name + ".bin", "length": len(blob),
                    "sha256": hashlib.sha256(blob).hexdigest()},
        "metadata": metadata or {},
    }
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path, bin_path = base.with_name(base.name + ".json"), base.with_name(base.name + ".bin")
    bin_path.write_bytes(blob)
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return json_path, bin_path


def _blob(blob: bytes, ref: dict, expected: int, what: str) -> bytes:
    lo, n = ref["offset"], ref["length"]
    if n != expected:
        raise FormatError(f"{what}: declared {n} bytes, shape needs {expected}")
    if lo < 0 or lo + n > len(blob):
        raise FormatError(f"{what}: bytes {lo}..{lo + n} outside payload of {len(blob)}")
    return blob[lo:lo + n]


def _load_weights(blob: bytes, e: dict, what: str) -> BinaryTensor:
    k, m = e["shape"]
    words = (m + 63) // 64
    if e.get("words_per_row", words) != words:
        raise FormatError(f"{what}: {e['words_per_row']} words per row, shape needs {words}")
    data = np.frombuffer(_blob(blob, e, k * words * 8, what), dtype="<u8").reshape(k, words)
    return BinaryTensor((k, m), data.astype(np.uint64))


def _load_bn(blob: bytes, e: dict, what: str) -> BatchNormParams:
    n = e["length"]
    arrays = {f: np.frombuffer(_blob(blob, e[f], 4 * n, f"{what}.{f}"), dtype="<f4").astype(np.float32)
              for f in _BN_FIELDS}
    return BatchNormParams(epsilon=e["epsilon"], **arrays)


def _check_cache(bn: BatchNormParams, fanin: int, cache: dict | None, what: str):
    if cache is None:
        return
    fresh = _threshold_cache(bn, fanin, cache["input_scale"])
    if fresh["thresholds"] != cache["thresholds"] or fresh["geq"] != cache["geq"]:
        raise FormatError(f"{what}: threshold cache disagrees with batch-norm parameters")


def load_model(path) -> tuple[list, dict]:
    """Read a model written by :func:`save_model`; returns (network, metadata)."""
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    manifest = json.loads(base.with_name(base.name + ".json").read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {manifest.get('version')!r}")
    blob = base.with_name(manifest["payload"]["file"]).read_bytes()
    if len(blob) != manifest["payload"]["length"]:
        raise FormatError(f"payload is {len(blob)} bytes, manifest declares {manifest['payload']['length']}")
    if hashlib.sha256(blob).hexdigest() != manifest["payload"]["sha256"]:
        raise FormatError("payload checksum mismatch")
    network = []
    for i, e in enumerate(manifest["layers"]):
        what = f"layer {i} ({e['name']})"
        conv = ConvGeometry(**e["conv"]) if e["conv"] is not None else None
        if e["type"] == "split":
            if e["merge"] != {"weight": 1, "threshold": 0}:
                raise FormatError(f"{what}: merge stage must be weight 1, threshold 0")
            blocks = []
            for j, be in enumerate(e["blocks"]):
                bn = _load_bn(blob, be["bn"], f"{what} block {j}")
                _check_cache(bn, be["stop"] - be["start"], be["threshold_cache"], f"{what} block {j}")
                blocks.append(Block(be["start"], be["stop"],
                                    _load_weights(blob, be["weights"], f"{what} block {j}"), bn))
            network.append(SplitLayer(e["kind"], e["in_features"], e["out_features"], blocks,
                                      conv, e["name"], e["init"]))
        else:
            bn = _load_bn(blob, e["bn"], what) if e["bn"] is not None else None
            if bn is not None:
                _check_cache(bn, e["in_features"], e["threshold_cache"], what)
            network.append(LayerSpec(e["kind"], e["in_features"], e["out_features"],
                                     _load_weights(blob, e["weights"], what), bn, conv, e["name"]))
    return network, manifest["metadata"]


def networks_equal(a: Sequence, b: Sequence) -> bool:
    """Bit-exact comparison of two networks (weights, batch norm, split layout)."""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if type(x) is not type(y) or x.kind != y.kind or x.name != y.name or x.conv != y.conv:
            return False
        if isinstance(x, SplitLayer):
            if x.n != y.n or x.block_bounds() != y.block_bounds():
                return False
            if not all(p.weights == q.weights and p.bn.equals(q.bn) for p, q in zip(x.blocks, y.blocks)):
                return False
        else:
            if not x.weights == y.weights:
                return False
            if (x.bn is None) != (y.bn is None) or (x.bn is not None and not x.bn.equals(y.bn)):
                return False
    return True
