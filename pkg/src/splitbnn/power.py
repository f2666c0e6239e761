"""Normalized power model for crossbar arrays and their column converters.

A flash converter of N bits needs ``2**N - 1`` comparators, so its power is
taken as ``alpha2 * (2**N - 1)``; a 1-bit sense amplifier is the N = 1 case.
Every array carries one converter group whose resolution is the array's
readout resolution, and arrays themselves cost ``array_unit_power`` each.
Only ratios are meaningful: the absolute scale is arbitrary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .xbar import InterfaceCensus

# overall saving of the 1-bit design over the 4-bit baseline used to calibrate
# the array cost
REFERENCE_SAVING = 0.607
REFERENCE_BITS = 4

BASELINES = {"BCNN-RRAM": 4, "XNOR-RRAM": 3}
METADATA = {"clock_mhz": 100, "process_nm": 45}


def adc_power(bits: int, alpha2: float = 1.0) -> float:
    """Flash-converter power ``alpha2 * (2**bits - 1)``."""
    if bits < 1:
        raise ValueError(f"converter needs at least 1 bit, got {bits}")
    return alpha2 * (2 ** bits - 1)


def calibrate_array_power(saving: float = REFERENCE_SAVING, baseline_bits: int = REFERENCE_BITS,
                          alpha2: float = 1.0) -> float:
    """Array cost that makes a 1-bit design save ``saving`` of the total power.

    Solves ``(P_N - P_1) / (A + P_N) = saving`` for ``A``.
    """
    if not 0 < saving < 1:
        raise ValueError("saving must lie in (0, 1)")
    gap = adc_power(baseline_bits, alpha2) - adc_power(1, alpha2)
    return gap / saving - adc_power(baseline_bits, alpha2)


@dataclass(frozen=True)
class PowerConfig:
    alpha2: float = 1.0
    array_unit_power: float = field(default_factory=calibrate_array_power)
    sa_unit_power: float | None = None  # defaults to a 1-bit flash converter

    def __post_init__(self):
        if self.alpha2 < 0 or self.array_unit_power < 0 or (self.sa_unit_power or 0) < 0:
            raise ValueError("power coefficients must be non-negative")

    def converter_power(self, bits: int) -> float:
        if bits == 1 and self.sa_unit_power is not None:
            return self.sa_unit_power
        return adc_power(bits, self.alpha2)

    def to_json(self) -> dict:
        return {"alpha2": self.alpha2, "array_unit_power": self.array_unit_power,
                "sa_unit_power": self.sa_unit_power}


@dataclass(frozen=True)
class PowerBreakdown:
    name: str
    bits: int | None
    arrays: int
    array_power: float
    interface_power: float

    @property
    def total(self) -> float:
        return self.array_power + self.interface_power

    def to_json(self) -> dict:
        return {"name": self.name, "bits": self.bits, "arrays": self.arrays,
                "array_power": self.array_power, "interface_power": self.interface_power,
                "total": self.total}


def saving(a: float, b: float) -> float:
    """Fractional saving of ``a`` relative to ``b``; zero when ``b`` is zero."""
    return 0.0 if b == 0 else 1.0 - a / b


@dataclass
class PowerReport:
    """Design under test plus the fixed-resolution baselines on the same arrays."""

    design: PowerBreakdown
    baselines: list[PowerBreakdown]
    config: PowerConfig

    def savings(self) -> dict:
        out = {}
        for b in self.baselines:
            out[b.name] = {
                "interface": round(100 * saving(self.design.interface_power, b.interface_power), 1),
                "total": round(100 * saving(self.design.total, b.total), 1),
            }
        return out

    def saving_vs(self, bits: int) -> float:
        """Total saving in percent (0.1 resolution) against the ``bits`` baseline."""
        for b in self.baselines:
            if b.bits == bits:
                return round(100 * saving(self.design.total, b.total), 1)
        raise KeyError(f"no {bits}-bit baseline")

    def to_json(self) -> dict:
        return {
            "design": self.design.to_json(),
            "baselines": [b.to_json() for b in self.baselines],
            "savings_percent": self.savings(),
            "config": self.config.to_json(),
            "metadata": METADATA,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def table(self) -> str:
        rows = [("design", "bits", "arrays", "array", "interface", "total")]
        for r in [self.design, *self.baselines]:
            rows.append((r.name, "-" if r.bits is None else str(r.bits), str(r.arrays),
                         f"{r.array_power:.3f}", f"{r.interface_power:.3f}", f"{r.total:.3f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        for name, s in self.savings().items():
            lines.append(f"saving vs {name}: interface {s['interface']:.1f}%  total {s['total']:.1f}%")
        return "\n".join(lines) + "\n"


def _breakdown(name: str, bits_per_array: list[int], cfg: PowerConfig, bits: int | None) -> PowerBreakdown:
    return PowerBreakdown(
        name, bits, len(bits_per_array), len(bits_per_array) * cfg.array_unit_power,
        sum(cfg.converter_power(b) for b in bits_per_array),
    )


def estimate(census: InterfaceCensus, cfg: PowerConfig | None = None, name: str = "proposed",
             baselines: dict | None = None) -> PowerReport:
    """Price a census and the same arrays read out by fixed-resolution converters."""
    cfg = cfg or PowerConfig()
    baselines = BASELINES if baselines is None else baselines
    bits = list(census.array_bits)
    design_bits = max(bits) if bits and len(set(bits)) == 1 else None
    design = _breakdown(name, bits, cfg, design_bits)
    others = [_breakdown(f"{label}", [n] * len(bits), cfg, n) for label, n in baselines.items()]
    return PowerReport(design, others, cfg)


def uniform_census(arrays: int, bits: int = 1) -> InterfaceCensus:
    """Census of ``arrays`` arrays that all read out at ``bits`` bits."""
    return InterfaceCensus(arrays, 0, arrays if bits == 1 else 0, 0 if bits == 1 else arrays,
                           0 if bits == 1 else bits, [bits] * arrays,
                           [1 if bits == 1 else 0] * arrays, [0 if bits == 1 else 1] * arrays)
