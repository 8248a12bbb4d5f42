"""Per-layer bitwidth assignment and its JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

B_MIN, B_MAX = 2, 8
PINNED_BITS = 8


class PolicyMismatchError(ValueError):
    """Policy does not cover the model's layers."""


@dataclass
class BitwidthPolicy:
    w_bits: list
    a_bits: list
    pinned: tuple = ()
    infeasible: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w_bits = [int(b) for b in self.w_bits]
        self.a_bits = [int(b) for b in self.a_bits]
        self.pinned = tuple(sorted(set(int(k) for k in self.pinned)))
        if len(self.w_bits) != len(self.a_bits):
            raise PolicyMismatchError("w_bits and a_bits lengths differ")

    def __len__(self):
        return len(self.w_bits)

    @classmethod
    def uniform(cls, n_layers, w_bits, a_bits=None, pin_ends=True):
        """Same bits everywhere; ends pinned at 8 when ``pin_ends``."""
        a_bits = w_bits if a_bits is None else a_bits
        pinned = (0, n_layers - 1) if pin_ends else ()
        w = [PINNED_BITS if k in pinned else w_bits for k in range(n_layers)]
        a = [PINNED_BITS if k in pinned else a_bits for k in range(n_layers)]
        return cls(w, a, pinned)

    @property
    def unpinned(self):
        return [k for k in range(len(self)) if k not in self.pinned]

    def copy(self) -> "BitwidthPolicy":
        return BitwidthPolicy(list(self.w_bits), list(self.a_bits), self.pinned, self.infeasible, dict(self.meta))

    def key(self) -> tuple:
        return tuple(self.w_bits), tuple(self.a_bits)

    def check(self, n_layers, b_min=B_MIN, b_max=B_MAX):
        """Raise unless the policy covers ``n_layers`` with legal bits."""
        if len(self) != n_layers:
            raise PolicyMismatchError(f"policy covers {len(self)} layers, model has {n_layers}")
        for k in range(n_layers):
            for name, b in (("w_bits", self.w_bits[k]), ("a_bits", self.a_bits[k])):
                if k in self.pinned:
                    if b != PINNED_BITS:
                        raise ValueError(f"pinned layer {k} must use {PINNED_BITS} bits, has {name}={b}")
                elif not b_min <= b <= b_max:
                    raise ValueError(f"layer {k} {name}={b} outside [{b_min}, {b_max}]")

    def to_dict(self) -> dict:
        doc = {
            "layers": [{"k": k, "w_bits": w, "a_bits": a} for k, (w, a) in enumerate(zip(self.w_bits, self.a_bits))],
            "pinned": list(self.pinned),
        }
        if self.infeasible:
            doc["infeasible"] = True
        return doc

    @classmethod
    def from_dict(cls, doc) -> "BitwidthPolicy":
        entries = sorted(doc["layers"], key=lambda e: e["k"])
        ks = [e["k"] for e in entries]
        if ks != list(range(len(ks))):
            raise PolicyMismatchError(f"policy layer indices are not 0..{len(ks) - 1}: {ks}")
        return cls([e["w_bits"] for e in entries], [e["a_bits"] for e in entries],
                   tuple(doc.get("pinned", ())), bool(doc.get("infeasible", False)))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "BitwidthPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))
