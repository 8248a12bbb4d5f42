"""Two policies with near-equal BitOPs but very different edge latency.

Enumerates every bitwidth assignment of the two searchable layers of a
4-layer toy net and prints the pair whose BitOPs agree within 2% while their
simulated latency differs the most.
"""

import itertools

from bitforge import hwsim
from bitforge.netgraph import model_from_dict
from bitforge.policy import BitwidthPolicy

TOY = {
    "layers": [
        {"kind": "conv", "c_in": 3, "c_out": 32, "kernel": 1, "stride": 1, "feat": 8},
        {"kind": "depthwise_conv", "c_in": 32, "c_out": 32, "kernel": 3, "stride": 1, "feat": 8},
        {"kind": "conv", "c_in": 32, "c_out": 32, "kernel": 1, "stride": 2, "feat": 8},
        {"kind": "fc", "c_in": 512, "c_out": 10},
    ],
}


def main():
    model = model_from_dict(TOY)
    hw = hwsim.preset("edge")
    rows = []
    for w1, a1, w2, a2 in itertools.product(range(2, 9), repeat=4):
        p = BitwidthPolicy([8, w1, w2, 8], [8, a1, a2, 8], pinned=(0, 3))
        rows.append((hwsim.bitops(model, p), hwsim.simulate(model, p, hw).latency, p))
    rows.sort(key=lambda r: r[0])
    best = max(((max(l1, l2) / min(l1, l2), r1, r2)
                for i, r2 in enumerate(rows) for r1 in rows[max(0, i - 200):i]
                for (o1, l1, _), (o2, l2, _) in [(r1, r2)] if o2 <= 1.02 * o1),
               key=lambda t: t[0])
    ratio, (o1, l1, p1), (o2, l2, p2) = best
    for ops, lat, p in ((o1, l1, p1), (o2, l2, p2)):
        print(f"w {p.w_bits} a {p.a_bits}: bitops {ops:,}  edge latency {lat * 1e6:.3f} us")
    print(f"bitops differ by {abs(o2 - o1) / o1:.1%}, latency by {ratio - 1:.0%}")


if __name__ == "__main__":
    main()
