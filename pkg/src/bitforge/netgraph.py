"""Minimal feed-forward CNN engine: model files, forward/backward, finetuning.

Layers are a strict chain of regular convolutions, depthwise convolutions
and fully-connected layers. Convolutions use "same" padding, so a layer with
stride ``s`` maps an ``s_feat x s_feat`` map to ``s_feat/s x s_feat/s``.
A fully-connected layer that follows a convolution sees the flattened
(C, H, W) map. ReLU follows every layer except the last one.

Everything runs in float64.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .data import Dataset

logger = logging.getLogger(__name__)

KINDS = ("conv", "depthwise_conv", "fc")


class ModelFileError(ValueError):
    """Model file violates the schema."""


class ShapeMismatchError(ValueError):
    """Consecutive layers (or an input batch) do not fit together."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    For ``fc`` layers ``c_in``/``c_out`` hold the input/output hidden sizes,
    ``s_kernel`` is 1, ``s_stride`` is 0 and ``s_feat`` is the input vector
    length.
    """

    k: int
    kind: str
    c_in: int
    c_out: int
    s_kernel: int
    s_stride: int
    s_feat: int
    bias: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelFileError(f"layer {self.k}: unknown kind {self.kind!r}")
        if min(self.c_in, self.c_out, self.s_feat) < 1:
            raise ModelFileError(f"layer {self.k}: sizes must be positive")
        if self.kind == "fc":
            if self.s_kernel != 1 or self.s_stride != 0:
                raise ModelFileError(f"layer {self.k}: fc needs kernel 1, stride 0")
            if self.s_feat != self.c_in:
                raise ModelFileError(f"layer {self.k}: fc feat must equal h_in")
            return
        if self.s_stride not in (1, 2):
            raise ModelFileError(f"layer {self.k}: stride must be 1 or 2")
        if self.s_kernel < 1 or self.s_kernel % 2 == 0:
            raise ModelFileError(f"layer {self.k}: kernel must be odd")
        if self.s_feat % self.s_stride:
            raise ModelFileError(f"layer {self.k}: feat not divisible by stride")
        if self.kind == "depthwise_conv" and self.c_in != self.c_out:
            raise ModelFileError(f"layer {self.k}: depthwise needs c_in == c_out")

    @property
    def i_dw(self) -> int:
        return int(self.kind == "depthwise_conv")

    @property
    def out_feat(self) -> int:
        if self.kind == "fc":
            return self.c_out
        return self.s_feat // self.s_stride

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "fc":
            return (self.c_out, self.c_in)
        if self.kind == "depthwise_conv":
            return (self.c_in, self.s_kernel, self.s_kernel)
        return (self.c_out, self.c_in, self.s_kernel, self.s_kernel)

    @property
    def n_weights(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def n_params(self) -> int:
        return self.n_weights + (self.c_out if self.bias else 0)

    @property
    def in_size(self) -> int:
        """Number of input activation values per image."""
        if self.kind == "fc":
            return self.c_in
        return self.c_in * self.s_feat**2

    @property
    def out_size(self) -> int:
        if self.kind == "fc":
            return self.c_out
        return self.c_out * self.out_feat**2


def _check_chain(layers):
    for prev, cur in zip(layers, layers[1:]):
        if cur.kind == "fc":
            ok = cur.c_in == prev.out_size
        else:
            ok = prev.kind != "fc" and cur.c_in == prev.c_out and cur.s_feat == prev.out_feat
        if not ok:
            raise ShapeMismatchError(
                f"layer {prev.k} output ({prev.kind}, c_out={prev.c_out}, "
                f"feat={prev.out_feat}) does not feed layer {cur.k} "
                f"({cur.kind}, c_in={cur.c_in}, feat={cur.s_feat})"
            )


@dataclass
class ModelGraph:
    """Ordered layer chain plus its parameter tensors."""

    layers: list
    weights: list
    biases: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ModelFileError("model has no layers")
        _check_chain(self.layers)
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            if w.shape != spec.weight_shape:
                raise ShapeMismatchError(f"layer {spec.k}: weight shape {w.shape} != {spec.weight_shape}")
            if spec.bias and (b is None or b.shape != (spec.c_out,)):
                raise ShapeMismatchError(f"layer {spec.k}: bad bias")

    def __len__(self):
        return len(self.layers)

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_size

    @property
    def input_shape(self) -> tuple:
        first = self.layers[0]
        if first.kind == "fc":
            return (first.c_in,)
        return (first.c_in, first.s_feat, first.s_feat)

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            list(self.layers),
            [w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            dict(self.meta),
        )

    def parameters(self):
        """Flat list of parameter arrays, weights then bias per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            if b is not None:
                out.append(b)
        return out


def init_params(layers, seed: int):
    """Kaiming-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in layers:
        fan_in = spec.n_weights // (spec.c_out if spec.kind != "depthwise_conv" else spec.c_in)
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=spec.weight_shape))
        biases.append(np.zeros(spec.c_out) if spec.bias else None)
    return weights, biases


def layers_from_json(entries) -> list:
    layers = []
    for k, e in enumerate(entries):
        try:
            kind = e["kind"]
            c_in, c_out = int(e["c_in"]), int(e["c_out"])
            bias = bool(e.get("bias", False))
            if kind == "fc":
                spec = LayerSpec(k, kind, c_in, c_out, 1, 0, int(e.get("feat", c_in)), bias)
            else:
                spec = LayerSpec(k, kind, c_in, c_out, int(e["kernel"]), int(e["stride"]), int(e["feat"]), bias)
        except (KeyError, TypeError) as exc:
            raise ModelFileError(f"layer {k}: missing or malformed field ({exc})") from exc
        layers.append(spec)
    return layers


def model_from_dict(doc: dict, base_dir=None) -> ModelGraph:
    if not isinstance(doc, dict) or not isinstance(doc.get("layers"), list):
        raise ModelFileError('model JSON needs a "layers" list')
    layers = layers_from_json(doc["layers"])
    _check_chain(layers)
    init = doc.get("init", "random:0")
    if init.startswith("random:"):
        weights, biases = init_params(layers, int(init.split(":", 1)[1]))
    elif init.startswith("weights:"):
        path = Path(init.split(":", 1)[1])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        weights, biases = read_weights(path, layers)
    else:
        raise ModelFileError(f"unknown init directive {init!r}")
    return ModelGraph(layers, weights, biases, meta={"init": init})


def load_model(model_file) -> ModelGraph:
    """Read a model JSON file; relative weight paths resolve next to it."""
    path = Path(model_file)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc, base_dir=path.parent)


def layers_to_json(layers) -> list:
    out = []
    for s in layers:
        e = {"kind": s.kind, "c_in": s.c_in, "c_out": s.c_out, "kernel": s.s_kernel,
             "stride": s.s_stride, "feat": s.s_feat, "bias": s.bias}
        out.append(e)
    return out


def _index_path(weights_path: Path) -> Path:
    return weights_path.with_name(weights_path.name + ".index.json")


def write_weights(model: ModelGraph, weights_path) -> Path:
    """Write parameters as little-endian float32, layer-major.

    A sidecar ``<file>.index.json`` records byte offset, count and shape of
    every tensor.
    """
    weights_path = Path(weights_path)
    entries, chunks, offset = [], [], 0
    for spec, w, b in zip(model.layers, model.weights, model.biases):
        for name, arr in (("weight", w), ("bias", b)):
            if arr is None:
                continue
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"layer": spec.k, "tensor": name, "shape": list(arr.shape),
                            "offset": offset, "count": int(arr.size)})
            chunks.append(data)
            offset += len(data)
    weights_path.write_bytes(b"".join(chunks))
    index = {"format": "float32-le", "layer_major": True, "total_bytes": offset, "tensors": entries}
    _index_path(weights_path).write_text(json.dumps(index, indent=1) + "\n")
    return weights_path


def read_weights(weights_path, layers):
    weights_path = Path(weights_path)
    index_path = _index_path(weights_path)
    if not weights_path.exists() or not index_path.exists():
        raise ModelFileError(f"weights file or index missing: {weights_path}")
    raw = weights_path.read_bytes()
    index = json.loads(index_path.read_text())
    weights = [None] * len(layers)
    biases = [None] * len(layers)
    for e in index["tensors"]:
        k = e["layer"]
        if k >= len(layers):
            raise ShapeMismatchError(f"weights file has tensor for missing layer {k}")
        arr = np.frombuffer(raw, dtype="<f4", count=e["count"], offset=e["offset"])
        arr = arr.astype(np.float64).reshape(e["shape"])
        if e["tensor"] == "weight":
            weights[k] = arr
        else:
            biases[k] = arr
    for spec in layers:
        if weights[spec.k] is None:
            raise ShapeMismatchError(f"weights file lacks layer {spec.k}")
        if spec.bias and biases[spec.k] is None:
            raise ShapeMismatchError(f"weights file lacks bias of layer {spec.k}")
    return weights, biases


def save_model(model: ModelGraph, model_file, weights_name=None) -> Path:
    """Write model JSON plus weights file next to it."""
    model_file = Path(model_file)
    weights_name = weights_name or model_file.stem + ".bin"
    write_weights(model, model_file.parent / weights_name)
    doc = {"layers": layers_to_json(model.layers), "init": f"weights:{weights_name}"}
    model_file.write_text(json.dumps(doc, indent=1) + "\n")
    return model_file


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp, k, stride, ho):
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :ho]


def conv_forward(x, w, stride):
    """Regular convolution via im2col, ``w`` is (C_out, C_in, K, K).

    Returns ``(out, cols)``; ``cols`` is reused by the backward pass.
    """
    n, c, h, _ = x.shape
    k = w.shape[-1]
    ho = h // stride
    if k == 1:
        cols = x[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(n * ho * ho, c)
    else:
        xp = _pad(x, (k - 1) // 2)
        cols = _windows(xp, k, stride, ho).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * ho, -1)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(n, ho, ho, -1).transpose(0, 3, 1, 2), cols


def conv_backward(x_shape, cols, w, stride, grad_out, need_dx=True):
    n, c, h, _ = x_shape
    k = w.shape[-1]
    p = (k - 1) // 2
    ho = h // stride
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
    dw = (g2.T @ cols).reshape(w.shape)
    if not need_dx:
        return None, dw
    dcols = (g2 @ w.reshape(w.shape[0], -1)).reshape(n, ho, ho, c, k, k)
    if k == 1 and stride == 1:
        return dcols[..., 0, 0].transpose(0, 3, 1, 2), dw
    dxp = np.zeros((n, c, h + 2 * p, h + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * ho:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return (dxp[:, :, p:p + h, p:p + h] if p else dxp), dw


def dwconv_forward(x, w, stride):
    """Depthwise convolution, ``w`` is (C, K, K). Returns ``(out, padded x)``."""
    h = x.shape[2]
    xp = np.ascontiguousarray(_pad(x, (w.shape[-1] - 1) // 2))
    return _kernels.dw_forward(xp, np.ascontiguousarray(w), stride, h // stride), xp


def dwconv_backward(x_shape, xp, w, stride, grad_out, need_dx=True):
    h = x_shape[2]
    p = (w.shape[-1] - 1) // 2
    dxp, dw = _kernels.dw_backward(xp, np.ascontiguousarray(w), stride,
                                   np.ascontiguousarray(grad_out), need_dx)
    if not need_dx:
        return None, dw
    return (dxp[:, :, p:p + h, p:p + h] if p else dxp), dw


def _layer_forward(spec, x, w, b):
    """Returns ``(y, ctx)``; ``ctx`` feeds :func:`_layer_backward`."""
    if spec.kind == "fc":
        x2 = x.reshape(x.shape[0], -1)
        y = x2 @ w.T
        if b is not None:
            y = y + b
        return y, (x.shape, x2)
    if spec.kind == "conv":
        y, saved = conv_forward(x, w, spec.s_stride)
    else:
        y, saved = dwconv_forward(x, w, spec.s_stride)
    if b is not None:
        y = y + b[None, :, None, None]
    return y, (x.shape, saved)


def _layer_backward(spec, ctx, w, grad_out, need_dx=True):
    """Return (dx, dw, db) for one layer; dx is None unless ``need_dx``."""
    x_shape, saved = ctx
    if spec.kind == "fc":
        dw = grad_out.T @ saved
        dx = (grad_out @ w).reshape(x_shape) if need_dx else None
        return dx, dw, grad_out.sum(axis=0)
    if spec.kind == "conv":
        dx, dw = conv_backward(x_shape, saved, w, spec.s_stride, grad_out, need_dx)
    else:
        dx, dw = dwconv_backward(x_shape, saved, w, spec.s_stride, grad_out, need_dx)
    return dx, dw, grad_out.sum(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# inference and training
# ---------------------------------------------------------------------------

def _check_batch(model, batch):
    if batch.ndim < 2 or tuple(batch.shape[1:]) != model.input_shape:
        raise ShapeMismatchError(f"batch shape {batch.shape[1:]} != model input {model.input_shape}")


def forward(model: ModelGraph, batch, capture_activations=False, quant_hook=None):
    """Run inference.

    Returns ``(logits, acts)``. With ``capture_activations`` set, ``acts[k]``
    is the (non-negative) input that layer ``k`` consumes, i.e. the image for
    layer 0 and the post-ReLU output of layer ``k-1`` otherwise; otherwise
    ``acts`` is None.
    """
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(model, batch)
    acts = [] if capture_activations else None
    x = batch
    last = len(model.layers) - 1
    for spec, w, b in zip(model.layers, model.weights, model.biases):
        if acts is not None:
            acts.append(x)
        if quant_hook is not None:
            x, _ = quant_hook.activation(spec.k, x)
            w, _ = quant_hook.weight(spec.k, w)
        x, _ = _layer_forward(spec, x, w, b)
        if spec.k != last:
            x = np.maximum(x, 0.0)
    return x, acts


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    g = p
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def loss_and_grads(model: ModelGraph, x, y, quant_hook=None, frozen_weights=None):
    """Training loss and gradients (lists aligned with weights / biases).

    Quantization uses the straight-through estimator: gradients flow through
    the rounding unchanged and are zeroed where the clamp saturated.
    ``frozen_weights`` (per layer ``(wq, mask)``) replaces on-the-fly weight
    quantization.
    """
    last = len(model.layers) - 1
    cache = []
    h = x
    for spec, w, b in zip(model.layers, model.weights, model.biases):
        amask = wmask = None
        if quant_hook is not None:
            h, amask = quant_hook.activation(spec.k, h)
            if frozen_weights is not None:
                w, wmask = frozen_weights[spec.k]
            else:
                w, wmask = quant_hook.weight(spec.k, w)
        out, ctx = _layer_forward(spec, h, w, b)
        cache.append((ctx, w, amask, wmask, out))
        h = np.maximum(out, 0.0) if spec.k != last else out
    loss, g = softmax_xent(h, y)
    gw = [None] * len(model.layers)
    gb = [None] * len(model.layers)
    for spec in reversed(model.layers):
        ctx, w, amask, wmask, out = cache[spec.k]
        if spec.k != last:
            g = g * (out > 0)
        g, dw, db = _layer_backward(spec, ctx, w, g, need_dx=spec.k > 0)
        if wmask is not None:
            dw = dw * wmask
        if amask is not None and g is not None:
            g = g * amask
        gw[spec.k] = dw
        gb[spec.k] = db if spec.bias else None
    return loss, gw, gb


def finetune(model: ModelGraph, data: Dataset, epochs=1, lr=1e-3, momentum=0.9,
             quant_hook=None, batch_size=32, seed=0, requantize="step") -> ModelGraph:
    """SGD with momentum, in place. Returns ``model``.

    ``requantize`` is ``"step"`` (weights fake-quantized from the float master
    copy at every step) or ``"epoch"`` (quantized once at the start of each
    epoch and held fixed while the master weights keep training).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if requantize not in ("step", "epoch"):
        raise ValueError(f"requantize must be 'step' or 'epoch', got {requantize!r}")
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [None if b is None else np.zeros_like(b) for b in model.biases]
    n = len(data)
    for epoch in range(epochs):
        frozen = None
        if quant_hook is not None and requantize == "epoch":
            frozen = [quant_hook.weight(s.k, w) for s, w in zip(model.layers, model.weights)]
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, gw, gb = loss_and_grads(model, data.x[idx], data.y[idx], quant_hook, frozen)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            total += loss * len(idx)
            if lr == 0:
                continue
            for k in range(len(model.layers)):
                vel_w[k] *= momentum
                vel_w[k] += gw[k]
                model.weights[k] -= lr * vel_w[k]
                if gb[k] is not None:
                    vel_b[k] *= momentum
                    vel_b[k] += gb[k]
                    model.biases[k] -= lr * vel_b[k]
        logger.debug("epoch %d mean loss %.4f", epoch, total / n)
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
    return model


def train_float(model: ModelGraph, data: Dataset, epochs=15, lr=0.02, momentum=0.9, seed=0) -> ModelGraph:
    """Float pretraining: ``epochs`` single-epoch finetunes, reshuffled with
    seeds ``seed, seed+1, ...``."""
    for e in range(epochs):
        finetune(model, data, 1, lr, momentum, seed=seed + e)
    return model


def evaluate(model: ModelGraph, data: Dataset, quant_hook=None, batch_size=500) -> float:
    """Top-1 accuracy; argmax ties go to the lower class index."""
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    correct = 0
    for start in range(0, n, batch_size):
        logits, _ = forward(model, data.x[start:start + batch_size], quant_hook=quant_hook)
        correct += int(np.sum(np.argmax(logits, axis=1) == data.y[start:start + batch_size]))
    return correct / n


def layer_features(model: ModelGraph, k: int, step_kind: str, prev_action: float) -> tuple:
    """Raw 10-tuple describing layer ``k`` at a weight or activation step.

    Conv kinds: (k, c_in, c_out, kernel, stride, feat, n_params, i_dw, i_wa, prev)
    fc:         (k, h_in, h_out, 1, 0, feat, n_params, 0, i_wa, prev)
    ``i_wa`` is 1 for the weight step and 0 for the activation step.
    """
    if step_kind not in ("weight", "activation"):
        raise ValueError(f"step_kind must be 'weight' or 'activation', got {step_kind!r}")
    spec = model.layers[k]
    i_wa = 1.0 if step_kind == "weight" else 0.0
    if spec.kind == "fc":
        return (float(k), float(spec.c_in), float(spec.c_out), 1.0, 0.0, float(spec.s_feat),
                float(spec.n_params), 0.0, i_wa, float(prev_action))
    return (float(k), float(spec.c_in), float(spec.c_out), float(spec.s_kernel), float(spec.s_stride),
            float(spec.s_feat), float(spec.n_params), float(spec.i_dw), i_wa, float(prev_action))
