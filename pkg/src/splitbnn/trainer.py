"""Binary MLP training with straight-through sign, and retraining of split layers.

Hidden layers compute ``sign(BN(x @ sign(W)))``; the classifier computes a
positively scaled ``x @ sign(W)`` so its argmax equals the integer scores of
the exported network.  Split layers train one weight block and one batch norm
per input slice; their merge (unit weights, zero threshold) is a buffer and
never receives gradients.
"""

from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .bnn import PIXEL_SCALE, BatchNormParams, BinaryTensor, LayerSpec, reference_forward, signed_pixels
from .reconstruct import MERGE_THRESHOLD, MERGE_WEIGHT, Block, SplitLayer


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 100
    lr: float = 1e-3
    lr_decay: float = 0.9  # per-epoch exponential decay factor
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 42
    dropout: float = 0.0
    val_size: int = 5000
    bn_momentum: float = 0.1  # torch convention: weight of the new batch
    bn_eps: float = 1e-5
    max_minutes: float | None = None
    threads: int = 1

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class _SignSTE(torch.autograd.Function):
    """sign with sign(0) = +1; gradient passed where ``|x| <= 1``."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.where(x >= 0, torch.ones_like(x), -torch.ones_like(x))

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * (x.abs() <= 1).to(grad.dtype)


def sign_ste(x: torch.Tensor, surrogate: bool = False) -> torch.Tensor:
    # the surrogate is the function whose derivative the STE reports
    return F.hardtanh(x) if surrogate else _SignSTE.apply(x)


def _glorot(k: int, m: int, gen: torch.Generator) -> torch.Tensor:
    a = math.sqrt(6.0 / (k + m))
    return (torch.rand(k, m, generator=gen) * 2 - 1) * a


class BinaryLinear(nn.Module):
    """Shadow weights stored (K, M), binarized on every forward pass."""

    def __init__(self, k: int, m: int, gen: torch.Generator, init: torch.Tensor | None = None):
        super().__init__()
        self.weight = nn.Parameter(_glorot(k, m, gen) if init is None else init.clone().float())

    def forward(self, x, surrogate: bool = False):
        return x @ sign_ste(self.weight, surrogate)

    def clip_(self):
        with torch.no_grad():
            self.weight.clamp_(-1.0, 1.0)

    def binary(self) -> BinaryTensor:
        w = self.weight.detach().numpy()
        return BinaryTensor.from_signs(np.where(w >= 0, 1, -1).astype(np.int8))


def _batchnorm(m: int, cfg: TrainConfig) -> nn.BatchNorm1d:
    return nn.BatchNorm1d(m, eps=cfg.bn_eps, momentum=cfg.bn_momentum)


def _load_bn(bn: nn.BatchNorm1d, params: BatchNormParams):
    with torch.no_grad():
        bn.running_mean.copy_(torch.from_numpy(params.mu - params.b))
        bn.running_var.copy_(torch.from_numpy(params.sigma.astype(np.float64) ** 2).float())
        bn.weight.copy_(torch.from_numpy(params.gamma))
        bn.bias.copy_(torch.from_numpy(params.beta))


def _export_bn(bn: nn.BatchNorm1d) -> BatchNormParams:
    m = bn.num_features
    return BatchNormParams(
        b=np.zeros(m),
        mu=bn.running_mean.detach().numpy(),
        sigma=np.sqrt(bn.running_var.detach().double().numpy()),
        gamma=bn.weight.detach().numpy(),
        beta=bn.bias.detach().numpy(),
        epsilon=bn.eps,
    )


class DenseStage(nn.Module):
    def __init__(self, k, m, cfg, gen, name="", init=None):
        super().__init__()
        self.name = name
        self.linear = BinaryLinear(k, m, gen, init)
        self.bn = _batchnorm(m, cfg)

    def forward(self, x, surrogate=False):
        return sign_ste(self.bn(self.linear(x, surrogate)), surrogate)

    def export(self) -> LayerSpec:
        w = self.linear.binary()
        return LayerSpec("dense", w.shape[0], w.shape[1], w, _export_bn(self.bn), name=self.name)


class SplitStage(nn.Module):
    """Per-block binary weights and batch norm followed by the fixed merge."""

    def __init__(self, bounds, m, cfg, gen, name="", inits=None):
        super().__init__()
        self.name = name
        self.bounds = [tuple(b) for b in bounds]
        inits = inits or [None] * len(self.bounds)
        self.linears = nn.ModuleList(
            BinaryLinear(hi - lo, m, gen, w) for (lo, hi), w in zip(self.bounds, inits)
        )
        self.bns = nn.ModuleList(_batchnorm(m, cfg) for _ in self.bounds)
        n = len(self.bounds)
        self.register_buffer("merge_weights", torch.full((n,), float(MERGE_WEIGHT)))
        self.register_buffer("merge_threshold", torch.tensor(float(MERGE_THRESHOLD)))

    def forward(self, x, surrogate=False):
        inter = torch.stack(
            [sign_ste(bn(lin(x[:, lo:hi], surrogate)), surrogate)
             for (lo, hi), lin, bn in zip(self.bounds, self.linears, self.bns)],
            dim=-1,
        )
        total = inter @ self.merge_weights - self.merge_threshold
        return sign_ste(total / len(self.bounds), surrogate)

    def export(self) -> SplitLayer:
        blocks = [Block(lo, hi, lin.binary(), _export_bn(bn))
                  for (lo, hi), lin, bn in zip(self.bounds, self.linears, self.bns)]
        m = blocks[0].weights.shape[1]
        return SplitLayer("dense", self.bounds[-1][1], m, blocks, name=self.name, init="retrained")


class Classifier(nn.Module):
    def __init__(self, k, m, gen, name="", init=None):
        super().__init__()
        self.name = name
        self.linear = BinaryLinear(k, m, gen, init)
        self.log_scale = nn.Parameter(torch.tensor(-0.5 * math.log(k)))

    def forward(self, x, surrogate=False):
        return self.linear(x, surrogate) * self.log_scale.exp()

    def export(self) -> LayerSpec:
        w = self.linear.binary()
        return LayerSpec("dense", w.shape[0], w.shape[1], w, None, name=self.name)


class BnnModel(nn.Module):
    """Sequential binary MLP; inputs are pixels scaled to ``q / 255``."""

    def __init__(self, stages: Sequence[nn.Module], classifier: Classifier, dropout: float = 0.0):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.classifier = classifier
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x, surrogate: bool = False):
        for stage in self.stages:
            x = self.dropout(stage(x, surrogate))
        return self.classifier(x, surrogate)

    def binary_layers(self) -> list[BinaryLinear]:
        return [m for m in self.modules() if isinstance(m, BinaryLinear)]

    def clip_(self):
        for lin in self.binary_layers():
            lin.clip_()

    def export(self) -> list:
        return [stage.export() for stage in self.stages] + [self.classifier.export()]

    def shadow_weights(self) -> list[np.ndarray]:
        """Full (K, M) shadow matrix per layer; split blocks are stacked by rows."""
        out = []
        for stage in [*self.stages, self.classifier]:
            if isinstance(stage, SplitStage):
                out.append(np.concatenate([lin.weight.detach().numpy() for lin in stage.linears]))
            else:
                out.append(stage.linear.weight.detach().numpy().copy())
        return out


def build_mlp(sizes: Sequence[int], cfg: TrainConfig) -> BnnModel:
    gen = torch.Generator().manual_seed(cfg.seed)
    stages = [DenseStage(k, m, cfg, gen, name=f"fc{i + 1}")
              for i, (k, m) in enumerate(zip(sizes[:-2], sizes[1:-1]))]
    clf = Classifier(sizes[-2], sizes[-1], gen, name=f"fc{len(sizes) - 1}")
    return BnnModel(stages, clf, cfg.dropout)


def model_from_network(network: Sequence, cfg: TrainConfig, shadow: Sequence[np.ndarray] | None = None,
                       shadow_scale: float = 0.5) -> BnnModel:
    """Trainable model initialised from an exported (possibly split) network.

    Shadow weights come from ``shadow`` when given (the baseline's real
    weights), else from the binary weights times ``shadow_scale``.
    """
    gen = torch.Generator().manual_seed(cfg.seed)

    def init(i, signs):
        if shadow is not None:
            return torch.from_numpy(np.asarray(shadow[i], dtype=np.float32))
        return torch.from_numpy(signs.astype(np.float32) * shadow_scale)

    stages = []
    for i, layer in enumerate(network[:-1]):
        if layer.kind != "dense":
            raise ConfigError("only dense networks are trainable")
        if isinstance(layer, SplitLayer):
            full = init(i, np.concatenate([b.weights.to_signs() for b in layer.blocks]))
            inits = [full[b.start:b.stop] for b in layer.blocks]
            stage = SplitStage(layer.block_bounds(), layer.out_features, cfg, gen, layer.name, inits)
            for bn, blk in zip(stage.bns, layer.blocks):
                _load_bn(bn, blk.bn)
        else:
            stage = DenseStage(layer.in_features, layer.out_features, cfg, gen, layer.name,
                               init(i, layer.weights.to_signs()))
            _load_bn(stage.bn, layer.bn)
        stages.append(stage)
    last = network[-1]
    clf = Classifier(last.in_features, last.out_features, gen, last.name,
                     init(len(network) - 1, last.weights.to_signs()))
    return BnnModel(stages, clf, cfg.dropout)


def scale_inputs(pixels) -> torch.Tensor:
    """Pixels to the real grid ``q / 255`` with ``q = 2p - 255``."""
    q = signed_pixels(pixels).reshape(len(pixels), -1)
    return torch.from_numpy(q.astype(np.float32) / PIXEL_SCALE)


def split_train_val(n: int, val_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[val_size:]), np.sort(perm[:val_size])


@dataclass
class TrainResult:
    model: BnnModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    seconds: float = 0.0
    stopped_early: bool = False


@torch.no_grad()
def torch_accuracy(model: BnnModel, x: torch.Tensor, y: torch.Tensor, batch_size: int = 1000) -> float:
    model.eval()
    correct = 0
    for lo in range(0, len(x), batch_size):
        correct += int((model(x[lo:lo + batch_size]).argmax(1) == y[lo:lo + batch_size]).sum())
    return correct / max(1, len(x))


def fit(model: BnnModel, pixels, labels, cfg: TrainConfig) -> TrainResult:
    """Adam with per-epoch exponential decay; returns the best-validation snapshot."""
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    try:
        return _fit(model, pixels, labels, cfg)
    finally:
        torch.set_num_threads(prev_threads)


def _fit(model, pixels, labels, cfg):
    x_all = scale_inputs(pixels)
    y_all = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    if cfg.val_size >= len(x_all):
        raise ConfigError(f"validation split of {cfg.val_size} leaves no training data ({len(x_all)} samples)")
    if cfg.val_size > 0:
        tr, va = split_train_val(len(x_all), cfg.val_size, cfg.seed)
    else:
        tr, va = np.arange(len(x_all)), np.arange(len(x_all))
    x_tr, y_tr, x_va, y_va = x_all[tr], y_all[tr], x_all[va], y_all[va]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.lr_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    result = TrainResult(model)
    best_state = copy.deepcopy(model.state_dict())
    start = time.process_time()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(x_tr), generator=gen)
        total, seen = 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            loss = F.cross_entropy(model(x_tr[idx]), y_tr[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"loss is {loss.item()} at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.clip_()
            total += loss.item() * len(idx)
            seen += len(idx)
        sched.step()
        val = torch_accuracy(model, x_va, y_va)
        result.history.append({"epoch": epoch, "train_loss": total / max(1, seen), "val_accuracy": val})
        if val > result.best_val_accuracy or epoch == 1:
            result.best_val_accuracy, result.best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
        if cfg.max_minutes is not None and time.process_time() - start > 60 * cfg.max_minutes:
            result.stopped_early = epoch < cfg.epochs
            break
    model.load_state_dict(best_state)
    model.eval()
    result.seconds = time.process_time() - start
    return result


def train_baseline(sizes: Sequence[int], pixels, labels, cfg: TrainConfig) -> TrainResult:
    return fit(build_mlp(sizes, cfg), pixels, labels, cfg)


def retrain_split(network: Sequence, pixels, labels, cfg: TrainConfig,
                  shadow: Sequence[np.ndarray] | None = None, train_merge: bool = False) -> TrainResult:
    """Retrain block weights and block batch norms; the merge stays fixed."""
    if train_merge:
        raise ConfigError("merge weights and thresholds are fixed and cannot be trained")
    return fit(model_from_network(network, cfg, shadow), pixels, labels, cfg)


def frozen_merge_digest(model: BnnModel) -> bytes:
    """Bytes of every merge buffer, to check they survive training unchanged."""
    parts = []
    for stage in model.stages:
        if isinstance(stage, SplitStage):
            parts.append(stage.merge_weights.numpy().tobytes())
            parts.append(stage.merge_threshold.numpy().tobytes())
    return b"".join(parts)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray

    @property
    def count(self) -> int:
        return int(self.confusion.sum())


def evaluate(network: Sequence, pixels, labels, classes: int | None = None,
             batch_size: int = 1000) -> EvalResult:
    """Accuracy and confusion counts (rows: true class) of the integer pipeline."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = classes or network[-1].out_features
    preds = np.concatenate([
        reference_forward(network, pixels[lo:lo + batch_size], keep_activations=False).predictions
        for lo in range(0, len(pixels), batch_size)
    ]) if len(pixels) else np.zeros(0, dtype=np.int64)
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    acc = float(np.trace(confusion) / len(labels)) if len(labels) else 0.0
    return EvalResult(acc, confusion)


def write_log(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_accuracy"], lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({"epoch": row["epoch"], "train_loss": f"{row['train_loss']:.6f}",
                             "val_accuracy": f"{row['val_accuracy']:.6f}"})
