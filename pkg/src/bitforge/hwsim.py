"""Analytic latency/energy models for bit-serial (temporal) and fused-PE
(spatial) accelerators, with roofline and BitOPs helpers.

Compute and DRAM traffic overlap fully: a layer takes
``max(t_computation, t_memory)`` plus a fixed overhead, and the part of the
memory time that compute does not hide is reported as ``t_stall``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .policy import B_MAX, B_MIN, PolicyMismatchError

FAMILIES = ("temporal", "spatial")


@dataclass(frozen=True)
class HardwareConfig:
    family: str = "temporal"
    batch: int = 1
    pe_rows: int = 8
    pe_cols: int = 8
    dram_bus_bits: int = 256
    clock_hz: float = 100e6
    on_chip_kib: float = 5040.0  # kibibits of weight buffer
    e_mem_pj_per_bit: float = 20.0
    p_dynamic_w: float = 0.32
    t_overhead_us: float = 0.1
    # operand pairs each temporal PE consumes per bit-plane pass
    pe_lanes: int = 256
    # hypothetical: every tensor already resident on chip, no DRAM traffic
    all_on_chip: bool = False
    name: str = "custom"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown accelerator family {self.family!r}")
        for f in ("batch", "pe_rows", "pe_cols", "dram_bus_bits", "clock_hz", "on_chip_kib", "pe_lanes"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        for f in ("e_mem_pj_per_bit", "p_dynamic_w", "t_overhead_us"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be non-negative")

    @property
    def n_pe(self) -> int:
        return self.pe_rows * self.pe_cols

    @property
    def bandwidth_bytes_per_s(self) -> float:
        return self.dram_bus_bits * self.clock_hz / 8

    @property
    def on_chip_bits(self) -> float:
        return self.on_chip_kib * 1024

    def with_(self, **kw) -> "HardwareConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc) -> "HardwareConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown hardware fields: {sorted(unknown)}")
        return cls(**doc)


# Array shape, port width and batch follow the Zynq-7020 / VU9P setups.
# Clock, lane count, buffer and energy constants are documented defaults.
PRESETS = {
    "edge": HardwareConfig("temporal", 1, 8, 8, 4 * 64, 100e6, 140 * 36, 20.0, 64 * 5e-3, 0.1, 256, name="edge"),
    "cloud": HardwareConfig("temporal", 16, 16, 16, 4 * 256, 250e6, 2160 * 36, 20.0, 256 * 5e-3, 0.1, 32, name="cloud"),
}


def preset(name, family=None) -> HardwareConfig:
    """``edge`` or ``cloud``; a ``-spatial`` suffix or ``family`` switches family."""
    base, _, suffix = name.partition("-")
    if base not in PRESETS or suffix not in ("", *FAMILIES):
        raise ValueError(f"unknown hardware preset {name!r}")
    fam = family or suffix or PRESETS[base].family
    hw = PRESETS[base]
    return hw if fam == hw.family else hw.with_(family=fam, name=f"{base}-{fam}")


def load_hardware(ref) -> HardwareConfig:
    """Preset name or path to a JSON file of HardwareConfig fields."""
    if isinstance(ref, HardwareConfig):
        return ref
    try:
        return preset(str(ref))
    except ValueError:
        pass
    path = Path(ref)
    if not path.is_file():
        raise ValueError(f"unknown hardware preset or missing config file: {ref}")
    return HardwareConfig.from_dict(json.loads(path.read_text()))


def pow2_bits(b) -> int:
    """Smallest power of two >= max(b, 2)."""
    return 1 << max(1, math.ceil(math.log2(max(int(b), 2))))


def layer_workload(layer, batch=1):
    """(macs, weight_count, activation_in_count, activation_out_count)."""
    return (batch * layer_macs(layer), layer.n_weights, batch * layer.in_size, batch * layer.out_size)


def layer_macs(layer) -> int:
    if layer.kind == "fc":
        return layer.c_in * layer.c_out
    per_pos = layer.s_kernel**2 * (1 if layer.i_dw else layer.c_in)
    return layer.c_out * layer.out_feat**2 * per_pos


def peak_ops(hw: HardwareConfig, w_bits, a_bits) -> float:
    """Peak MAC/s of the array at the given operand widths."""
    if hw.family == "temporal":
        return hw.n_pe * hw.pe_lanes * hw.clock_hz / (w_bits * a_bits)
    return hw.n_pe * (16 / pow2_bits(w_bits)) * (16 / pow2_bits(a_bits)) * hw.clock_hz


def _check_bits(k, w_bits, a_bits):
    for name, b in (("w_bits", w_bits), ("a_bits", a_bits)):
        if not B_MIN <= b <= B_MAX:
            raise ValueError(f"layer {k}: unsupported {name}={b}, must be in [{B_MIN}, {B_MAX}]")


def dram_bits(layer, w_bits, a_bits, hw: HardwareConfig) -> float:
    if hw.all_on_chip:
        return 0.0
    _, n_w, n_in, n_out = layer_workload(layer, hw.batch)
    w_total = n_w * w_bits
    tiles = math.ceil(w_total / hw.on_chip_bits) if w_total > hw.on_chip_bits else 1
    return float(w_total * tiles + (n_in + n_out) * a_bits)


@dataclass
class LayerCost:
    layer: int
    kind: str
    w_bits: int
    a_bits: int
    macs: int
    bitops: int
    dram_bits: float
    t_computation: float  # seconds
    t_stall: float
    t_overhead: float
    latency: float
    energy: float  # joules
    op_intensity: float  # MACs per DRAM byte


def layer_cost(layer, w_bits, a_bits, hw: HardwareConfig) -> LayerCost:
    _check_bits(layer.k, w_bits, a_bits)
    macs = layer_workload(layer, hw.batch)[0]
    t_comp = macs / peak_ops(hw, w_bits, a_bits)
    bits = dram_bits(layer, w_bits, a_bits, hw)
    t_mem = bits / (hw.dram_bus_bits * hw.clock_hz)
    t_stall = max(0.0, t_mem - t_comp)
    t_over = hw.t_overhead_us * 1e-6
    lat = t_comp + t_stall + t_over
    energy = hw.e_mem_pj_per_bit * 1e-12 * bits + hw.p_dynamic_w * lat
    intensity = macs / (bits / 8) if bits > 0 else math.inf
    return LayerCost(layer.k, layer.kind, w_bits, a_bits, macs, macs * w_bits * a_bits, bits,
                     t_comp, t_stall, t_over, lat, energy, intensity)


@dataclass
class CostReport:
    layers: list
    hw: HardwareConfig = field(default_factory=HardwareConfig)

    def total(self, attr) -> float:
        return float(sum(getattr(c, attr) for c in self.layers))

    @property
    def latency(self) -> float:
        return self.total("latency")

    @property
    def energy(self) -> float:
        return self.total("energy")

    @property
    def dram_bits(self) -> float:
        return self.total("dram_bits")

    @property
    def macs(self) -> int:
        return int(self.total("macs"))

    @property
    def bitops(self) -> int:
        return int(self.total("bitops"))

    def rows(self):
        for c in self.layers:
            yield {
                "layer": c.layer, "kind": c.kind, "w_bits": c.w_bits, "a_bits": c.a_bits,
                "macs": c.macs, "dram_bits": f"{c.dram_bits:.0f}",
                "t_comp_us": f"{c.t_computation * 1e6:.6f}", "t_stall_us": f"{c.t_stall * 1e6:.6f}",
                "latency_us": f"{c.latency * 1e6:.6f}", "energy_uj": f"{c.energy * 1e6:.6f}",
                "intensity": f"{c.op_intensity:.6g}",
            }

    def write_csv(self, path):
        fields = ["layer", "kind", "w_bits", "a_bits", "macs", "dram_bits", "t_comp_us",
                  "t_stall_us", "latency_us", "energy_uj", "intensity"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(self.rows())


def _layers(model):
    return list(getattr(model, "layers", model))


def simulate(model, policy, hw: HardwareConfig) -> CostReport:
    """Per-layer latency and energy of ``policy`` on ``hw``."""
    layers = _layers(model)
    if len(policy) != len(layers):
        raise PolicyMismatchError(f"policy covers {len(policy)} layers, model has {len(layers)}")
    return CostReport([layer_cost(l, w, a, hw) for l, w, a in zip(layers, policy.w_bits, policy.a_bits)], hw)


latency = simulate
energy = simulate


def op_intensity(layer, w_bits, a_bits, hw: HardwareConfig) -> float:
    bits = dram_bits(layer, w_bits, a_bits, hw)
    return layer_workload(layer, hw.batch)[0] / (bits / 8) if bits > 0 else math.inf


def roofline_point(layer, w_bits, a_bits, hw: HardwareConfig) -> float:
    """Attainable MAC/s: ``min(peak, intensity * bandwidth)``."""
    return min(peak_ops(hw, w_bits, a_bits), op_intensity(layer, w_bits, a_bits, hw) * hw.bandwidth_bytes_per_s)


def ridge_point(hw: HardwareConfig, w_bits, a_bits) -> float:
    return peak_ops(hw, w_bits, a_bits) / hw.bandwidth_bytes_per_s


def roofline_rows(model, policy, hw: HardwareConfig):
    out = []
    for l, wb, ab in zip(_layers(model), policy.w_bits, policy.a_bits):
        out.append({
            "layer": l.k, "kind": l.kind, "w_bits": wb, "a_bits": ab,
            "intensity": op_intensity(l, wb, ab, hw),
            "attained": roofline_point(l, wb, ab, hw),
            "peak": peak_ops(hw, wb, ab),
            "bandwidth": hw.bandwidth_bytes_per_s,
        })
    return out


def write_roofline_csv(model, policy, hw, path):
    rows = roofline_rows(model, policy, hw)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "kind", "w_bits", "a_bits", "intensity", "attained", "peak", "bandwidth"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, **{k: f"{r[k]:.9g}" for k in ("intensity", "attained", "peak", "bandwidth")}})


def bitops(model, policy, batch=1) -> int:
    """``sum macs * w_bits * a_bits``; accepts any bit values."""
    return int(sum(batch * layer_macs(l) * w * a for l, w, a in zip(_layers(model), policy.w_bits, policy.a_bits)))


def total_macs(model, batch=1) -> int:
    return int(np.sum([batch * layer_macs(l) for l in _layers(model)]))
