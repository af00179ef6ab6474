"""Small fully-convolutional segmenter with hand-written backprop.

Tensors are plain numpy arrays.  The public batch layout is NCHW.
Internally each activation lives in a flat, zero-padded, channels-last
buffer, so every 3x3 tap is a contiguous row offset and a convolution is
nine plain matmuls with no gather copies.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DatasetFormatError, NumericError

DEFAULT_CHANNELS = (1, 16, 16, 16, 2)
LEAKY_SLOPE = 0.01
DICE_SMOOTH = 1.0

GradSet = list  # list[np.ndarray], one entry per parameter tensor, same order as SegNet.params


@dataclass
class ConvLayer:
    weight: np.ndarray  # (3, 3, cin, cout)
    bias: np.ndarray  # (cout,)
    act: bool

    @property
    def cin(self) -> int:
        return self.weight.shape[2]

    @property
    def cout(self) -> int:
        return self.weight.shape[3]


@dataclass
class Trace:
    """Activations cached by ``forward_trace`` for a later ``backward``.

    Inputs are stored as flat zero-padded buffers of shape (n*(H+2)*(W+2), c).
    """

    shape: tuple = (0, 0, 0)  # (n, H, W)
    padded_inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)


def _geometry(n: int, h: int, w: int) -> tuple[int, int, int]:
    # padded row width, padded buffer length, number of window origins
    wp = w + 2
    total = n * (h + 2) * wp
    return wp, total, total - (2 * wp + 2)


def _zero_border(flat: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    v = flat.reshape(n, h + 2, w + 2, -1)
    v[:, 0] = 0
    v[:, -1] = 0
    v[:, :, 0] = 0
    v[:, :, -1] = 0
    return flat


def _to_padded(x: np.ndarray) -> np.ndarray:
    """NHWC batch to flat padded buffer."""
    n, h, w, c = x.shape
    buf = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    buf[:, 1:-1, 1:-1] = x
    return buf.reshape(-1, c)


def _conv3x3(xf: np.ndarray, w: np.ndarray, b: np.ndarray, wp: int, span: int) -> np.ndarray:
    # Output at window origin p reads padded positions p + i*wp + j.  Origins that
    # straddle the border produce junk that callers discard.
    y = xf[0:span] @ w[0, 0]
    y += b
    for i in range(3):
        for j in range(3):
            if i or j:
                off = i * wp + j
                y += xf[off:off + span] @ w[i, j]
    return y


class SegNet:
    """Stack of 3x3 same-padded convolutions with leaky-ReLU between them.

    The last layer is linear and emits one logit map per class.
    """

    def __init__(self, layers: list[ConvLayer], slope: float = LEAKY_SLOPE):
        if not layers:
            raise ConfigError("SegNet needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.cout != b.cin:
                raise ConfigError(f"channel mismatch between layers: {a.cout} -> {b.cin}")
        self.layers = layers
        self.slope = float(slope)

    @classmethod
    def build(
        cls,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        seed: int = 0,
        slope: float = LEAKY_SLOPE,
        dtype=np.float32,
    ) -> "SegNet":
        """He-uniform initialised net; biases start at zero."""
        if len(channels) < 2:
            raise ConfigError("channels must list at least input and output widths")
        rng = np.random.default_rng(seed)
        layers = []
        last = len(channels) - 2
        for k, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
            limit = np.sqrt(6.0 / (cin * 9))
            w = rng.uniform(-limit, limit, size=(3, 3, cin, cout)).astype(dtype)
            layers.append(ConvLayer(w, np.zeros(cout, dtype=dtype), act=k != last))
        return cls(layers, slope)

    @property
    def channels(self) -> list[int]:
        return [self.layers[0].cin] + [layer.cout for layer in self.layers]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].cout

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def with_params(self, params: Sequence[np.ndarray]) -> "SegNet":
        """New net with the same architecture and the given parameter arrays."""
        if len(params) != 2 * len(self.layers):
            raise ConfigError("parameter list length does not match the architecture")
        layers = []
        for k, layer in enumerate(self.layers):
            w, b = params[2 * k], params[2 * k + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ConfigError(f"parameter shape mismatch in layer {k}")
            layers.append(ConvLayer(np.asarray(w, dtype=self.dtype), np.asarray(b, dtype=self.dtype), layer.act))
        return SegNet(layers, self.slope)

    def copy(self) -> "SegNet":
        return self.with_params([p.copy() for p in self.params])

    def _check_batch(self, batch: np.ndarray) -> None:
        if batch.ndim != 4:
            raise ConfigError(f"expected batch of shape (n, ch, H, W), got {batch.shape}")
        if batch.shape[1] != self.layers[0].cin:
            raise ConfigError(f"batch has {batch.shape[1]} channels, net expects {self.layers[0].cin}")
        if batch.shape[2] < 3 or batch.shape[3] < 3:
            raise ConfigError("spatial dims must be at least 3")
        if not np.all(np.isfinite(batch)):
            raise NumericError("non-finite values in input batch")

    def forward_trace(self, batch: np.ndarray) -> tuple[np.ndarray, Trace]:
        self._check_batch(batch)
        n, _, h, w = batch.shape
        wp, total, span = _geometry(n, h, w)
        xf = _to_padded(np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=self.dtype))
        trace = Trace((n, h, w))
        for layer in self.layers:
            z = _conv3x3(xf, layer.weight, layer.bias, wp, span)
            trace.padded_inputs.append(xf)
            trace.preacts.append(z)
            a = np.maximum(z, z * self.dtype.type(self.slope)) if layer.act else z
            # window origin p is the padded position p + wp + 1 of the next input
            xf = np.empty((total, layer.cout), dtype=self.dtype)
            xf[:wp + 1] = 0
            xf[wp + 1:wp + 1 + span] = a
            xf[wp + 1 + span:] = 0
            _zero_border(xf, n, h, w)
        out = xf.reshape(n, h + 2, w + 2, -1)[:, 1:-1, 1:-1]
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), trace

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return self.forward_trace(batch)[0]

    def backward(self, trace: Trace, dlogits: np.ndarray) -> GradSet:
        n, h, w = trace.shape
        if dlogits.shape != (n, self.n_classes, h, w):
            raise ConfigError(f"dlogits shape {dlogits.shape} does not match the traced forward pass")
        wp, total, span = _geometry(n, h, w)
        dpad = _to_padded(np.ascontiguousarray(dlogits.transpose(0, 2, 3, 1), dtype=self.dtype))
        dy = dpad[wp + 1:wp + 1 + span]
        grads: list = [None] * (2 * len(self.layers))
        slope = self.dtype.type(self.slope)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            xf = trace.padded_inputs[k]
            if layer.act:
                dy = dy.copy()
                np.multiply(dy, slope, out=dy, where=trace.preacts[k] <= 0)
            dw = np.empty_like(layer.weight)
            for i in range(3):
                for j in range(3):
                    off = i * wp + j
                    dw[i, j] = xf[off:off + span].T @ dy
            grads[2 * k] = dw
            grads[2 * k + 1] = dy.sum(axis=0)
            if k > 0:
                dx = np.zeros((total, layer.cin), dtype=self.dtype)
                for i in range(3):
                    for j in range(3):
                        off = i * wp + j
                        dx[off:off + span] += dy @ layer.weight[i, j].T
                # padding cells are constants; origins outside the image carry no signal
                _zero_border(dx, n, h, w)
                dy = dx[wp + 1:wp + 1 + span]
        return grads


def forward(net: SegNet, batch: np.ndarray) -> np.ndarray:
    """Per-pixel class logits, shape (n, c, H, W)."""
    return net.forward(batch)


def backward(net: SegNet, batch: np.ndarray, dlogits: np.ndarray) -> GradSet:
    """Parameter gradients for upstream gradient ``dlogits``; recomputes the forward pass."""
    _, trace = net.forward_trace(batch)
    return net.backward(trace, dlogits)


# --------------------------------------------------------------------- losses

def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _one_hot(labels: np.ndarray, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = np.argwhere((labels < 0) | (labels >= c))
        raise DataError(f"labels outside 0..{c - 1} at indices {bad[:10].tolist()}")
    return (labels[:, None, ...] == np.arange(c).reshape(1, c, *([1] * (labels.ndim - 1)))).astype(np.float64)


def _check_pair(logits: np.ndarray, labels: np.ndarray) -> None:
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ConfigError(f"logits {logits.shape} and labels {np.shape(labels)} are not paired")


def ce_terms(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample mean pixel cross-entropy and its gradient w.r.t. each sample's logits."""
    _check_pair(logits, labels)
    c = logits.shape[1]
    y = _one_hot(labels, c)
    p = softmax(logits)
    logp = np.log(np.clip(p, 1e-300, None))
    npix = np.prod(logits.shape[2:])
    per = -(y * logp).sum(axis=1).reshape(len(logits), -1).sum(axis=1) / npix
    return per, (p - y) / npix


def dice_terms(logits: np.ndarray, labels: np.ndarray, smooth: float = DICE_SMOOTH) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample soft-Dice loss (1 - class-mean soft DSC) and per-sample gradients."""
    _check_pair(logits, labels)
    n, c = logits.shape[:2]
    y = _one_hot(labels, c)
    p = softmax(logits)
    axes = tuple(range(2, logits.ndim))
    inter = (p * y).sum(axis=axes)
    denom = p.sum(axis=axes) + y.sum(axis=axes) + smooth
    dsc = (2 * inter + smooth) / denom
    per = 1.0 - dsc.mean(axis=1)
    inter_b = inter.reshape(n, c, *([1] * len(axes)))
    denom_b = denom.reshape(n, c, *([1] * len(axes)))
    dp = -(2 * y * denom_b - (2 * inter_b + smooth)) / (denom_b ** 2) / c
    dz = p * (dp - (p * dp).sum(axis=1, keepdims=True))
    return per, dz


def ce_dice_terms(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, da = ce_terms(logits, labels)
    b, db = dice_terms(logits, labels)
    return a + b, da + db


LOSS_TERMS: dict[str, Callable] = {"ce": ce_terms, "dice": dice_terms, "ce+dice": ce_dice_terms}


def per_sample_loss(name: str, logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return _terms(name)(logits, labels)[0]


def _terms(name: str) -> Callable:
    try:
        return LOSS_TERMS[name]
    except KeyError:
        raise ConfigError(f"unknown loss {name!r}; choose from {sorted(LOSS_TERMS)}") from None


def weighted_loss(name: str, logits: np.ndarray, labels: np.ndarray, sample_weights=None) -> tuple[float, np.ndarray]:
    """Mean over samples of ``w_i * loss_i`` and the exact gradient w.r.t. logits."""
    per, grad = _terms(name)(logits, labels)
    n = len(per)
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,):
        raise ConfigError(f"sample_weights must have length {n}")
    loss = float((w * per).sum() / n)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite {name} loss")
    dlogits = grad * (w / n).reshape(n, *([1] * (grad.ndim - 1)))
    return loss, dlogits.astype(logits.dtype)


def loss_ce(logits, labels, sample_weights=None):
    return weighted_loss("ce", logits, labels, sample_weights)


def loss_soft_dice(logits, labels, sample_weights=None):
    return weighted_loss("dice", logits, labels, sample_weights)


# ------------------------------------------------------------ parameter updates

def grad_l2_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_grads(grads: GradSet, max_norm: float | None) -> tuple[GradSet, float]:
    """Rescale ``grads`` to norm at most ``max_norm``; returns the grads and the scale applied."""
    if max_norm is None:
        return grads, 1.0
    norm = grad_l2_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, 1.0
    scale = max_norm / norm
    return [g * np.asarray(scale, dtype=g.dtype) for g in grads], scale


def sgd_step(
    net: SegNet,
    grads: GradSet,
    lr: float,
    momentum_state: GradSet | None = None,
    momentum: float = 0.9,
) -> tuple[SegNet, GradSet]:
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``theta <- theta - lr * v``."""
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    params = net.params
    if momentum_state is None:
        momentum_state = [np.zeros_like(p) for p in params]
    velocity = [momentum * v + g for v, g in zip(momentum_state, grads)]
    new = [p - np.asarray(lr, dtype=p.dtype) * v.astype(p.dtype) for p, v in zip(params, velocity)]
    return net.with_params(new), velocity


def perturb(net: SegNet, direction: GradSet, step: float) -> SegNet:
    """Copy of ``net`` with parameters ``theta + step * direction``; ``net`` is untouched."""
    params = net.params
    if len(direction) != len(params) or any(d.shape != p.shape for d, p in zip(direction, params)):
        raise ConfigError("perturbation direction is not shape-congruent with the parameters")
    return net.with_params([p + (step * d.astype(np.float64)).astype(p.dtype) for p, d in zip(params, direction)])


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name}")


# ------------------------------------------------------------------ checkpoint

CKPT_MAGIC = b"JASEGNET"


def save_checkpoint(net: SegNet, path: str | Path) -> None:
    blocks = []
    for k, layer in enumerate(net.layers):
        blocks.append({"name": f"layer{k}.weight", "shape": list(layer.weight.shape)})
        blocks.append({"name": f"layer{k}.bias", "shape": list(layer.bias.shape)})
    header = {
        "version": 1,
        "dtype": "f32le",
        "slope": net.slope,
        "layers": [{"cin": l.cin, "cout": l.cout, "kernel": 3, "act": l.act} for l in net.layers],
        "blocks": blocks,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for p in net.params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> SegNet:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise DatasetFormatError(f"{path}: bad checkpoint magic at offset 0")
    if len(data) < 12:
        raise DatasetFormatError(f"{path}: truncated checkpoint header")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"{path}: malformed checkpoint header: {exc}") from None
    if header.get("dtype") != "f32le":
        raise DatasetFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    offset = 12 + hlen
    params = []
    for block in header["blocks"]:
        count = int(np.prod(block["shape"]))
        end = offset + 4 * count
        if end > len(data):
            raise DatasetFormatError(f"{path}: truncated payload in block {block['name']} at offset {offset}")
        params.append(np.frombuffer(data[offset:end], dtype="<f4").reshape(block["shape"]).astype(np.float32))
        offset = end
    if offset != len(data):
        raise DatasetFormatError(f"{path}: {len(data) - offset} trailing bytes after parameter blocks")
    layers = []
    for k, spec in enumerate(header["layers"]):
        w, b = params[2 * k], params[2 * k + 1]
        if w.shape != (3, 3, spec["cin"], spec["cout"]):
            raise DatasetFormatError(f"{path}: layer {k} weight shape {w.shape} contradicts header")
        layers.append(ConvLayer(w, b, bool(spec["act"])))
    return SegNet(layers, header["slope"])
