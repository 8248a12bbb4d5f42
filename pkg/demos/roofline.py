"""Per-layer roofline position of the desk net on the edge and cloud presets.

Depthwise layers sit left of the ridge (memory bound) on the narrow edge
port and right of it on the cloud part, which is why the two presets prefer
different bitwidths for the same layer.
"""

import argparse

from bitforge import hwsim
from bitforge.cli import bundled_model_path
from bitforge.netgraph import load_model
from bitforge.policy import BitwidthPolicy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bits", type=int, default=8, help="uniform bitwidth of the searchable layers")
    args = ap.parse_args()
    model = load_model(bundled_model_path())
    policy = BitwidthPolicy.uniform(len(model), args.bits)
    for name in ("edge", "cloud"):
        hw = hwsim.preset(name)
        rep = hwsim.simulate(model, policy, hw)
        print(f"\n{name}: {hw.n_pe} PEs, {hw.dram_bus_bits}-bit port, batch {hw.batch}, "
              f"total latency {rep.latency * 1e6:.2f} us")
        print(f"{'layer':>5} {'kind':>15} {'intensity':>10} {'ridge':>8} {'bound':>7} {'stall share':>11}")
        for layer, c in zip(model.layers, rep.layers):
            ridge = hwsim.ridge_point(hw, c.w_bits, c.a_bits)
            bound = "memory" if c.op_intensity < ridge else "compute"
            print(f"{c.layer:>5} {c.kind:>15} {c.op_intensity:>10.2f} {ridge:>8.2f} {bound:>7} "
                  f"{c.t_stall / c.latency:>11.0%}")


if __name__ == "__main__":
    main()
