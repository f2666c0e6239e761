"""Partial-sum quantizers: uniform (mid-rise) and Lloyd-Max on a KDE density."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_simpson, simpson

# Simpson needs an odd number of samples; 4096 intervals over the support
GRID_POINTS = 4097
KDE_PAD = 8.0
MIN_REGION_MASS = 1e-12


@dataclass(frozen=True, eq=False)
class QuantizerSpec:
    """Scalar quantizer: ``2**bits`` levels separated by ``2**bits - 1`` boundaries.

    A value lying exactly on a boundary maps to the upper level.
    """

    kind: str
    bits: int
    boundaries: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        lv = np.asarray(self.levels, dtype=np.float64)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "levels", lv)
        if self.bits < 1:
            raise ValueError("a quantizer needs at least 1 bit")
        if lv.shape != (2 ** self.bits,) or b.shape != (2 ** self.bits - 1,):
            raise ValueError(f"{self.bits}-bit quantizer needs {2 ** self.bits} levels")
        if np.any(np.diff(lv) <= 0) or np.any(np.diff(b) <= 0):
            raise ValueError("levels and boundaries must be strictly increasing")
        if np.any(b < lv[:-1]) or np.any(b > lv[1:]):
            raise ValueError("each boundary must lie between its neighbouring levels")

    def region(self, x) -> np.ndarray:
        return np.searchsorted(self.boundaries, np.asarray(x, dtype=np.float64), side="right")

    def quantize(self, x) -> np.ndarray:
        return self.levels[self.region(x)]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "bits": self.bits,
            "boundaries": self.boundaries.tolist(),
            "levels": self.levels.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "QuantizerSpec":
        return cls(d["kind"], int(d["bits"]), np.array(d["boundaries"]), np.array(d["levels"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def equals(self, other: "QuantizerSpec") -> bool:
        return (
            self.kind == other.kind and self.bits == other.bits
            and np.array_equal(self.boundaries, other.boundaries)
            and np.array_equal(self.levels, other.levels)
        )


def linear_quantizer(range_min: float, range_max: float, bits: int) -> QuantizerSpec:
    """Uniform mid-rise quantizer; out-of-range values clamp to the end levels."""
    if not range_min < range_max:
        raise ValueError(f"invalid range [{range_min}, {range_max}]")
    if bits < 1:
        raise ValueError("a quantizer needs at least 1 bit")
    count = 2 ** bits
    step = (range_max - range_min) / count
    levels = range_min + (np.arange(count) + 0.5) * step
    return QuantizerSpec("linear", bits, (levels[:-1] + levels[1:]) / 2, levels)


def quantize_partial_sums(sums, spec: QuantizerSpec) -> np.ndarray:
    return spec.quantize(sums)


def silverman_bandwidth(sigma: float, n: int) -> float:
    """Normal-reference bandwidth ``1.06 * sigma * n ** (-1/5)``."""
    return 1.06 * sigma * n ** (-0.2)


_SQRT_2PI = math.sqrt(2 * math.pi)


@dataclass(frozen=True, eq=False)
class KdeModel:
    """Gaussian-kernel density estimate.

    Samples are kept as distinct values with multiplicities, which makes
    integer-valued partial sums cheap to evaluate exactly.
    """

    values: np.ndarray
    counts: np.ndarray
    n: int
    sigma: float
    bandwidth: float

    @property
    def support(self) -> tuple[float, float]:
        pad = KDE_PAD * self.bandwidth
        return float(self.values[0] - pad), float(self.values[-1] + pad)

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1)
        out = np.empty_like(flat)
        h = self.bandwidth
        w = self.counts / (self.n * h * _SQRT_2PI)
        step = max(1, (1 << 22) // max(1, len(self.values)))
        for lo in range(0, len(flat), step):
            z = (flat[lo:lo + step, None] - self.values[None, :]) / h
            out[lo:lo + step] = np.exp(-0.5 * z * z) @ w
        return out.reshape(x.shape)

    __call__ = density


def kde_fit(samples, bandwidth: float | None = None) -> KdeModel:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size < 2:
        raise ValueError("KDE needs at least two samples")
    sigma = float(np.std(samples, ddof=1))
    if not sigma > 0:
        raise ValueError("samples have zero variance; density is degenerate")
    values, counts = np.unique(samples, return_counts=True)
    h = silverman_bandwidth(sigma, samples.size) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    return KdeModel(values, counts.astype(np.float64), int(samples.size), sigma, h)


def kde_fit_counts(values, counts, bandwidth: float | None = None) -> KdeModel:
    """KDE from a histogram: distinct ``values`` observed ``counts`` times."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    counts = np.asarray(counts, dtype=np.float64).reshape(-1)
    if values.shape != counts.shape or np.any(counts < 0):
        raise ValueError("values and non-negative counts must have the same length")
    keep = counts > 0
    values, counts = values[keep], counts[keep]
    order = np.argsort(values)
    values, counts = values[order], counts[order]
    n = int(round(counts.sum()))
    if n < 2:
        raise ValueError("KDE needs at least two samples")
    mean = float(counts @ values / n)
    sigma = math.sqrt(float(counts @ (values - mean) ** 2) / (n - 1))
    if not sigma > 0:
        raise ValueError("samples have zero variance; density is degenerate")
    h = silverman_bandwidth(sigma, n) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    return KdeModel(values, counts, n, sigma, h)


class _GridIntegrals:
    """Cumulative mass and first moment of a pdf on a fixed Simpson grid."""

    def __init__(self, pdf: Callable, support: tuple[float, float], points: int = GRID_POINTS):
        a, b = support
        if not a < b:
            raise ValueError(f"invalid support {support}")
        self.support = (float(a), float(b))
        self.x = np.linspace(a, b, points)
        self.f = np.asarray(pdf(self.x), dtype=np.float64)
        if np.any(self.f < 0) or not np.all(np.isfinite(self.f)):
            raise ValueError("pdf must be finite and non-negative on the support")
        self.mass = cumulative_simpson(self.f, x=self.x, initial=0.0)
        self.moment = cumulative_simpson(self.f * self.x, x=self.x, initial=0.0)

    def regions(self, boundaries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        edges = np.concatenate(([self.support[0]], boundaries, [self.support[1]]))
        mass = np.diff(np.interp(edges, self.x, self.mass))
        moment = np.diff(np.interp(edges, self.x, self.moment))
        return mass, moment

    def mse(self, spec: QuantizerSpec) -> float:
        err = (self.x - spec.quantize(self.x)) ** 2 * self.f
        return float(simpson(err, x=self.x) / simpson(self.f, x=self.x))


def centroids(pdf: Callable, support: tuple[float, float], boundaries) -> np.ndarray:
    grid = _GridIntegrals(pdf, support)
    mass, moment = grid.regions(np.asarray(boundaries, dtype=np.float64))
    return moment / mass


def quantizer_mse(spec: QuantizerSpec, pdf: Callable, support: tuple[float, float]) -> float:
    """Mean squared quantization error under ``pdf`` restricted to ``support``."""
    return _GridIntegrals(pdf, support).mse(spec)


def _companding_levels(grid: _GridIntegrals, bits: int) -> np.ndarray:
    density = np.cbrt(grid.f)
    cum = cumulative_simpson(density, x=grid.x, initial=0.0)
    if not cum[-1] > 0:
        return linear_quantizer(*grid.support, bits).levels.copy()
    targets = (np.arange(2 ** bits) + 0.5) / 2 ** bits * cum[-1]
    levels = np.interp(targets, cum, grid.x)
    if np.any(np.diff(levels) <= 0):
        return linear_quantizer(*grid.support, bits).levels.copy()
    return levels


def _lloyd_step(grid: _GridIntegrals, levels: np.ndarray):
    """Centroids of the midpoint regions, plus the region masses."""
    boundaries = (levels[:-1] + levels[1:]) / 2
    mass, moment = grid.regions(boundaries)
    ok = mass >= MIN_REGION_MASS
    cent = levels.copy()
    cent[ok] = moment[ok] / mass[ok]
    return cent, mass, ok


def _newton_step(grid: _GridIntegrals, levels: np.ndarray, cent: np.ndarray, mass: np.ndarray):
    """Newton correction for the fixed point ``centroid(midpoints(l)) == l``.

    The Jacobian of the centroid map is tridiagonal: moving a boundary only
    changes the two regions it separates.
    """
    a, b = grid.support
    count = len(levels)
    edges = np.concatenate(([a], (levels[:-1] + levels[1:]) / 2, [b]))
    f_edge = np.interp(edges, grid.x, grid.f)
    upper = f_edge[1:] * (edges[1:] - cent) / mass  # d cent_i / d edge_{i+1}
    lower = f_edge[:-1] * (cent - edges[:-1]) / mass  # d cent_i / d edge_i
    upper[-1] = 0.0
    lower[0] = 0.0
    jac = np.diag(0.5 * (upper + lower) - 1.0)
    idx = np.arange(count - 1)
    jac[idx, idx + 1] = 0.5 * upper[:-1]
    jac[idx + 1, idx] = 0.5 * lower[1:]
    try:
        return levels + np.linalg.solve(jac, -(cent - levels))
    except np.linalg.LinAlgError:
        return None


def lloyd_max(pdf: Callable, support: tuple[float, float], bits: int, tol: float = 1e-6,
              max_iter: int = 200) -> QuantizerSpec:
    """Alternate centroid and midpoint conditions until the levels settle.

    Starts from levels spaced by the asymptotically optimal point density
    (proportional to ``pdf ** (1/3)``), which for a uniform pdf is the
    uniform quantizer itself.  Each iteration takes a Newton-corrected step
    on the centroid/midpoint fixed point and falls back to the plain Lloyd
    update whenever that step would not shrink the residual.  The loop stops
    once a plain update would move no level by ``tol`` or more.  A region
    whose mass drops below ``MIN_REGION_MASS`` has its level moved to the
    middle of the widest region.
    """
    grid = _GridIntegrals(pdf, support)
    a, b = grid.support
    levels = _companding_levels(grid, bits)
    for _ in range(max_iter):
        cent, mass, ok = _lloyd_step(grid, levels)
        if not ok.all():
            boundaries = (levels[:-1] + levels[1:]) / 2
            edges = [a, *boundaries, b]
            for i in np.flatnonzero(~ok):
                j = int(np.argmax(np.diff(edges)))
                cent[i] = (edges[j] + edges[j + 1]) / 2
                edges.insert(j + 1, cent[i])
            levels = np.sort(cent)
            continue
        residual = float(np.max(np.abs(cent - levels)))
        if residual < tol:
            break
        new = _newton_step(grid, levels, cent, mass)
        if new is not None and np.all(np.diff(new) > 0) and a < new[0] and new[-1] < b:
            trial, trial_mass, trial_ok = _lloyd_step(grid, new)
            if trial_ok.all() and np.max(np.abs(trial - new)) < residual:
                levels = new
                continue
        levels = cent
    return QuantizerSpec("lloyd-max", bits, (levels[:-1] + levels[1:]) / 2, levels)


def fit_quantizer(kind: str, bits: int, block_size: int, samples=None) -> QuantizerSpec:
    """Quantizer for the partial sums of a block of ``block_size`` rows.

    ``linear`` spans the achievable range ``[-block_size, block_size]``;
    ``lloyd-max`` runs on a KDE of ``samples`` over its padded support.
    """
    if kind == "linear":
        return linear_quantizer(-block_size, block_size, bits)
    if kind == "lloyd-max":
        if samples is None:
            raise ValueError("Lloyd-Max needs partial-sum samples")
        kde = kde_fit(samples)
        return lloyd_max(kde.density, kde.support, bits)
    raise ValueError(f"unknown quantizer kind {kind!r}")
