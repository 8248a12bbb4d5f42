"""Linear fake-quantization with KL clip calibration, k-means codebooks,
and model-size accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._kernels import fake_quant
from .netgraph import forward
from .policy import PINNED_BITS, PolicyMismatchError

N_BINS = 2048
N_CANDIDATES = 100
KL_EPS = 1e-9
# candidates whose divergence is within this of the minimum count as tied;
# ties resolve to the smallest clip
KL_TIE_TOL = 1e-12


def round_half_away(x):
    """Round to nearest integer, halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    bits: int
    clip: float
    mode: str = "symmetric"  # or "nonneg"

    def __post_init__(self):
        if self.mode not in ("symmetric", "nonneg"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if not self.clip > 0:
            raise ValueError("clip must be positive")

    @property
    def max_level(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def scale(self) -> float:
        return self.clip / self.max_level

    @property
    def n_levels(self) -> int:
        return 2 * self.max_level + 1 if self.mode == "symmetric" else self.max_level + 1


def linear_quantize(values, q: QuantParams):
    """``round(clamp(v, c) / s) * s`` on the symmetric or non-negative grid."""
    lo = -q.clip if q.mode == "symmetric" else 0.0
    v = np.clip(values, lo, q.clip)
    return round_half_away(v / q.scale) * q.scale


# ---------------------------------------------------------------------------
# histogram calibration
# ---------------------------------------------------------------------------

@dataclass
class Histogram:
    """Equal-width histogram of magnitudes over ``[0, max_abs]``.

    Exact zeros are left out: every grid represents them exactly, and the
    ReLU zero spike would otherwise swamp the divergence of the lowest cell.
    """

    counts: np.ndarray
    max_abs: float

    @classmethod
    def from_values(cls, values, bins=N_BINS) -> "Histogram":
        a = np.abs(np.asarray(values, dtype=np.float64)).ravel()
        if a.size == 0:
            return cls(np.zeros(bins), 0.0)
        nz = a[a > 0]
        if nz.size == 0:
            counts = np.zeros(bins)
            counts[0] = a.size
            return cls(counts, 0.0)
        a = nz
        max_abs = float(a.max())
        counts, _ = np.histogram(a, bins=bins, range=(0.0, max_abs))
        return cls(counts.astype(np.float64), max_abs)

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> float:
        return float(np.sum(self.counts))


def clip_candidates(max_abs, n=N_CANDIDATES):
    """``n`` evenly spaced clips in ``(0.05 max_abs, max_abs]``, ascending."""
    j = np.arange(1, n + 1)
    return max_abs * (0.05 + 0.95 * j / n)


def _smooth(p):
    p = np.where(p > 0, p, KL_EPS)
    return p / p.sum()


def clip_kl(hist: Histogram, bits: int, clip: float) -> float:
    """KL(P || Q) between the histogram and its quantized reconstruction.

    Bins lying wholly inside ``[0, clip]`` are assigned to the level their
    centre rounds to; mass beyond the clip collapses onto the top level. Each
    level's mass is spread evenly over the non-empty bins of its cell (over
    all its bins if none is non-empty), so bins past the clip keep no
    reconstruction mass.
    """
    nb = hist.n_bins
    width = hist.max_abs / nb
    idx = np.arange(nb)
    centers = (idx + 0.5) * width
    upper = (idx + 1) * width
    p = hist.counts / hist.total
    top = 2 ** (bits - 1) - 1
    scale = clip / top
    inside = upper <= clip * (1 + 1e-9)
    n_in = int(inside.sum())
    levels = round_half_away(centers[:n_in] / scale).astype(np.int64)
    mass = np.bincount(levels, weights=p[:n_in], minlength=top + 1)
    mass[top] += p[n_in:].sum()
    nonzero = p[:n_in] > 0
    nz_count = np.bincount(levels, weights=nonzero.astype(np.float64), minlength=top + 1)
    all_count = np.bincount(levels, minlength=top + 1).astype(np.float64)
    q = np.zeros(nb)
    use_nz = nz_count[levels] > 0
    per_bin = np.where(use_nz, mass[levels] / np.maximum(nz_count[levels], 1),
                       mass[levels] / np.maximum(all_count[levels], 1))
    q[:n_in] = np.where(use_nz & ~nonzero, 0.0, per_bin)
    if all_count[top] == 0 and mass[top] > 0 and n_in > 0:
        q[n_in - 1] += mass[top]
    ps, qs = _smooth(p), _smooth(q)
    return float(np.sum(ps * np.log(ps / qs)))


def kl_profile(hist: Histogram, bits: int, n=N_CANDIDATES):
    """Clip candidates and the divergence at each."""
    if hist.total <= 0:
        raise ValueError("empty histogram")
    cands = clip_candidates(hist.max_abs, n)
    return cands, np.array([clip_kl(hist, bits, c) for c in cands])


def _pick(cands, kls):
    best = kls.min()
    return int(np.flatnonzero(kls <= best + KL_TIE_TOL * max(1.0, abs(best)))[0])


def calibrate_clip(hist: Histogram, bits: int, mode="symmetric") -> float:
    """Clip minimising the KL divergence over the candidate grid.

    ``mode`` does not change the search: both modes quantize magnitudes onto
    ``2^(b-1) - 1`` positive levels.
    """
    if mode not in ("symmetric", "nonneg"):
        raise ValueError(f"unknown mode {mode!r}")
    if hist.total <= 0:
        raise ValueError("empty histogram")
    if hist.max_abs == 0.0:
        return 1.0
    cands, kls = kl_profile(hist, bits)
    return float(cands[_pick(cands, kls)])


# ---------------------------------------------------------------------------
# k-means codebooks
# ---------------------------------------------------------------------------

@dataclass
class CodebookQuant:
    bits: int
    centroids: np.ndarray  # ascending
    indices: np.ndarray
    sse_history: list = field(default_factory=list)
    degenerate: bool = False

    @property
    def sse(self) -> float:
        return self.sse_history[-1] if self.sse_history else 0.0

    def dequantize(self):
        return self.centroids[self.indices]


def nearest_centroid(values, centroids):
    """Index of the nearest (ascending) centroid; exact midpoints go low."""
    mids = (centroids[1:] + centroids[:-1]) / 2
    return np.searchsorted(mids, values, side="left")


def kmeans_quantize(values, bits: int, iters=50, seed=0, tol=1e-6) -> CodebookQuant:
    """1-D Lloyd's algorithm with greedy k-means++ seeding."""
    v = np.asarray(values, dtype=np.float64).ravel()
    k = 2 ** bits
    uniq = np.unique(v)
    if len(uniq) <= k:
        cents = np.concatenate([uniq, np.full(k - len(uniq), uniq[-1])])
        idx = nearest_centroid(v, uniq)
        return CodebookQuant(bits, cents, idx, [0.0], degenerate=len(uniq) < k)
    rng = np.random.default_rng(seed)
    cents = [v[rng.integers(len(v))]]
    d2 = (v - cents[0]) ** 2
    n_try = 2 + int(np.log(k))
    for _ in range(1, k):
        # greedy k-means++: sample a few D^2 candidates, keep the lowest potential
        picks = v[rng.choice(len(v), size=n_try, p=d2 / d2.sum())]
        trial = np.minimum(d2[None, :], (v[None, :] - picks[:, None]) ** 2)
        best = int(np.argmin(trial.sum(axis=1)))
        cents.append(picks[best])
        d2 = trial[best]
    cents = np.sort(np.array(cents))
    history = []
    for _ in range(iters):
        idx = nearest_centroid(v, cents)
        sums = np.bincount(idx, weights=v, minlength=k)
        cnt = np.bincount(idx, minlength=k)
        new = np.where(cnt > 0, sums / np.maximum(cnt, 1), cents)
        order = np.argsort(new, kind="stable")
        new = new[order]
        moved = np.max(np.abs(new - cents))
        cents = new
        history.append(float(np.sum((v - cents[nearest_centroid(v, cents)]) ** 2)))
        if moved < tol:
            break
    idx = nearest_centroid(v, cents)
    return CodebookQuant(bits, cents, idx, history)


# ---------------------------------------------------------------------------
# whole-model quantization
# ---------------------------------------------------------------------------

class LinearQuantHook:
    """Fake-quantization hook consumed by :mod:`bitforge.netgraph`.

    ``weight`` / ``activation`` return ``(quantized, ste_mask)``; the mask
    zeroes gradients of values that the clamp saturated.
    """

    def __init__(self, w_params, a_params):
        self.w_params = list(w_params)
        self.a_params = list(a_params)

    def weight(self, k, w):
        q = self.w_params[k]
        if q is None:
            return w, None
        return fake_quant(np.ascontiguousarray(w, dtype=np.float64), -q.clip, q.clip, q.scale)

    def activation(self, k, x):
        q = self.a_params[k]
        if q is None:
            return x, None
        return fake_quant(np.ascontiguousarray(x, dtype=np.float64), 0.0, q.clip, q.scale)


class CodebookHook(LinearQuantHook):
    """Weights snap to fixed k-means centroids; activations stay linear."""

    def __init__(self, codebooks, a_params):
        super().__init__([None] * len(codebooks), a_params)
        self.codebooks = list(codebooks)

    def weight(self, k, w):
        cents = self.codebooks[k]
        return cents[nearest_centroid(w, cents)], None


class Calibrator:
    """Histograms of a float model, with memoised clips and codebooks.

    Weight histograms come from the parameters, activation histograms from
    one float forward pass over the calibration split. Clips are computed
    once per (layer, target, bits).
    """

    def __init__(self, model, calib, bins=N_BINS):
        if len(calib) == 0:
            raise ValueError("calibration split is empty")
        self.model = model
        _, acts = forward(model, calib.x, capture_activations=True)
        self.w_hist = [Histogram.from_values(w, bins) for w in model.weights]
        self.a_hist = [Histogram.from_values(a, bins) for a in acts]
        self._clips = {}
        self._codebooks = {}

    def clip(self, k, target, bits):
        key = (k, target, bits)
        if key not in self._clips:
            hist = self.w_hist[k] if target == "w" else self.a_hist[k]
            self._clips[key] = calibrate_clip(hist, bits, "symmetric" if target == "w" else "nonneg")
        return self._clips[key]

    def codebook(self, k, bits):
        key = (k, bits)
        if key not in self._codebooks:
            self._codebooks[key] = kmeans_quantize(self.model.weights[k], bits).centroids
        return self._codebooks[key]

    def report_rows(self, policy):
        rows = []
        for k in range(len(self.model)):
            for target, bits, hist in (("w", policy.w_bits[k], self.w_hist[k]),
                                       ("a", policy.a_bits[k], self.a_hist[k])):
                c = self.clip(k, target, bits)
                kl = clip_kl(hist, bits, c) if hist.max_abs > 0 else 0.0
                rows.append({"layer": k, "target": target, "bits": bits, "clip": c, "kl": kl})
        return rows


def _effective_bits(policy, k):
    if k in policy.pinned:
        return PINNED_BITS, PINNED_BITS
    return policy.w_bits[k], policy.a_bits[k]


def quantize_model(model, policy, calib=None, codebook=False, calibrator=None):
    """Build a fake-quantization hook for ``policy``.

    Pinned layers always use 8/8 bits. Activations use the non-negative
    grid. With ``codebook`` the weights use k-means centroids instead of the
    linear grid.
    """
    if len(policy) != len(model):
        raise PolicyMismatchError(f"policy covers {len(policy)} layers, model has {len(model)}")
    if calibrator is None:
        if calib is None:
            raise ValueError("need a calibration split or a Calibrator")
        calibrator = Calibrator(model, calib)
    w_params, a_params, books = [], [], []
    for k in range(len(model)):
        wb, ab = _effective_bits(policy, k)
        a_params.append(QuantParams(ab, calibrator.clip(k, "a", ab), "nonneg"))
        if codebook:
            books.append(calibrator.codebook(k, wb))
        else:
            w_params.append(QuantParams(wb, calibrator.clip(k, "w", wb), "symmetric"))
    if codebook:
        return CodebookHook(books, a_params)
    return LinearQuantHook(w_params, a_params)


def model_size(model, policy, codebook_mode=False) -> int:
    """Storage in bits: ``sum n_params * w_bits`` (+ 32-bit centroids)."""
    layers = getattr(model, "layers", model)
    if len(policy) != len(layers):
        raise PolicyMismatchError(f"policy covers {len(policy)} layers, model has {len(layers)}")
    total = 0
    for spec, wb in zip(layers, policy.w_bits):
        total += spec.n_params * wb
        if codebook_mode:
            total += 32 * 2**wb
    return int(total)


def write_calibration_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["layer", "target", "bits", "clip", "kl"])
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "clip": f"{r['clip']:.9g}", "kl": f"{r['kl']:.9g}"})
