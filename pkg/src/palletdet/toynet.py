"""A small fully convolutional dense predictor with hand-written backprop.

Tensors are NHWC.  The trunk is two stride-2 3x3 convolutions followed by
two dilated 3x3 convolutions, all with ReLU, and a 1x1 convolution emitting
every head's raw channels.  :class:`HeadDecoder` turns raw channels into
head outputs (softmax, sigmoid, or anchor + scale * raw).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .dense import HEAD_NAMES, LINEAR_HEADS, SIGMOID_HEADS, SOFTMAX_HEADS, TOTAL_CHANNELS, \
    DensePrediction, head_slices

CHECKPOINT_MAGIC = b"PDNET001"


class Conv2D:
    """``k x k`` convolution with 'same'-style padding, stride and dilation."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, dilation: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32, gain: float = 1.0):
        if min(cin, cout, k, stride, dilation) < 1:
            raise ValueError("convolution sizes must be positive")
        self.cin, self.cout, self.k, self.stride, self.dilation = cin, cout, k, stride, dilation
        self.pad = dilation * (k - 1) // 2
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = k * k * cin
        bound = gain * np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(-bound, bound, (fan_in, cout)).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def out_size(self, h: int, w: int):
        span = self.dilation * (self.k - 1)
        return (h + 2 * self.pad - span - 1) // self.stride + 1, (w + 2 * self.pad - span - 1) // self.stride + 1

    def _offsets(self):
        d = self.dilation
        return [(i * d, j * d) for i in range(self.k) for j in range(self.k)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[-1] != self.cin:
            raise ValueError(f"expected (B,H,W,{self.cin}) input, got {x.shape}")
        b, h, w, _ = x.shape
        ho, wo = self.out_size(h, w)
        s = self.stride
        if self.k == 1 and s == 1:
            cols = x
        else:
            xp = np.pad(x, ((0, 0), (self.pad, self.pad), (self.pad, self.pad), (0, 0)))
            cols = np.concatenate([xp[:, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s]
                                   for di, dj in self._offsets()], axis=-1)
        self._cache = (x.shape, cols)
        return cols @ self.w + self.b

    def backward(self, dout: np.ndarray) -> np.ndarray:
        shape, cols = self._cache
        b, h, w, c = shape
        _, ho, wo, _ = dout.shape
        flat = dout.reshape(-1, self.cout)
        self.dw += cols.reshape(-1, cols.shape[-1]).T @ flat
        self.db += flat.sum(0)
        dcols = dout @ self.w.T
        if self.k == 1 and self.stride == 1:
            return dcols
        s, p = self.stride, self.pad
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=dout.dtype)
        for n, (di, dj) in enumerate(self._offsets()):
            dxp[:, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s] += dcols[..., n * c:(n + 1) * c]
        return dxp[:, p:p + h, p:p + w]


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 8
    widths: tuple = (32, 48, 48, 48)
    dilations: tuple = (2, 4)
    out_channels: int = TOTAL_CHANNELS
    head_gain: float = 0.1

    def __post_init__(self):
        if len(self.widths) != 4 or len(self.dilations) != 2:
            raise ValueError("the trunk has four convolutions, two of them dilated")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "NetConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


class ToyNet:
    """Output grid is the input grid subsampled by 4 (cell (i, j) ~ pixel (4i, 4j))."""

    STRIDE = 4

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        w1, w2, w3, w4 = cfg.widths
        d3, d4 = cfg.dilations
        self.layers = [
            Conv2D(cfg.in_channels, w1, 3, 2, 1, rng, dtype), ReLU(),
            Conv2D(w1, w2, 3, 2, 1, rng, dtype), ReLU(),
            Conv2D(w2, w3, 3, 1, d3, rng, dtype), ReLU(),
            Conv2D(w3, w4, 3, 1, d4, rng, dtype), ReLU(),
            Conv2D(w4, cfg.out_channels, 1, 1, 1, rng, dtype, gain=cfg.head_gain),
        ]

    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list:
        return [g for layer in self.layers for g in layer.grads()]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self) -> None:
        for g in self.grads():
            g[...] = 0

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, draw) -> np.ndarray:
        d = np.asarray(draw, dtype=self.dtype)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat)
        if flat.size != self.n_params():
            raise ValueError("parameter vector has the wrong length")
        start = 0
        for p in self.params():
            p[...] = flat[start:start + p.size].reshape(p.shape)
            start += p.size

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for g in self.grads()])


# -- head decoding ---------------------------------------------------------------

DEFAULT_DIMS = (0.29, 0.43, 0.21)

# linear head -> output units per raw unit
LINEAR_SCALES = {
    "keypoints_2d": 0.1,
    "keypoints_3d": 0.25,
    "position": 0.25,
    "rotation": 1.0,
    "front_distance": 0.25,
    "dims_slh": 0.1,
    "dims_wdh": 0.1,
}


@dataclass
class SampleContext:
    """What the decoder needs to know about a sample besides the pixels."""
    camera: object                 # geometry.OrthoCamera at input resolution
    prior: tuple | None = None     # (short, long, height) metres
    reference_depth: float = 2.5


def _softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class HeadDecoder:
    """Raw network channels -> head outputs, and the matching backward pass.

    Linear heads are ``anchor + scale * raw``; the anchor places metric
    heads at the pixel's own ray at the reference depth, so the network
    only regresses offsets.
    """

    def __init__(self, stride: int = ToyNet.STRIDE):
        self.stride = stride
        self.slices = head_slices()

    def anchors(self, contexts: list, grid_shape: tuple) -> np.ndarray:
        gh, gw = grid_shape
        out = np.zeros((len(contexts), gh, gw, TOTAL_CHANNELS))
        rows = np.arange(gh) * self.stride
        cols = np.arange(gw) * self.stride
        for b, ctx in enumerate(contexts):
            if ctx is None:
                continue
            cam = ctx.camera
            xx = np.broadcast_to(((cols - cam.cx) / cam.ppm)[None, :], (gh, gw))
            yy = np.broadcast_to(((rows - cam.cy) / cam.ppm)[:, None], (gh, gw))
            ray = np.stack([xx, yy, np.full((gh, gw), ctx.reference_depth)], -1)
            dims = np.asarray(ctx.prior if ctx.prior is not None else DEFAULT_DIMS, dtype=np.float64)
            out[b, ..., self.slices["position"]] = ray
            out[b, ..., self.slices["keypoints_3d"]] = np.tile(ray, 8)
            out[b, ..., self.slices["front_distance"]] = ctx.reference_depth
            out[b, ..., self.slices["dims_slh"]] = dims
            out[b, ..., self.slices["dims_wdh"]] = dims
        return out

    def scales(self) -> np.ndarray:
        s = np.ones(TOTAL_CHANNELS)
        for name, v in LINEAR_SCALES.items():
            s[self.slices[name]] = v
        return s

    def decode(self, raw: np.ndarray, anchors: np.ndarray | None = None) -> DensePrediction:
        raw64 = raw.astype(np.float64)
        scale = self.scales()
        heads = {}
        for name in HEAD_NAMES:
            sl = self.slices[name]
            z = raw64[..., sl]
            if name in SOFTMAX_HEADS:
                heads[name] = _softmax(z)
            elif name in SIGMOID_HEADS:
                heads[name] = _sigmoid(z)
            else:
                v = z * scale[sl]
                heads[name] = v + anchors[..., sl] if anchors is not None else v
        return DensePrediction(heads)

    def backward(self, pred: DensePrediction, grads: dict) -> np.ndarray:
        """Gradient w.r.t. raw channels from gradients w.r.t. head outputs."""
        b, h, w = pred.shape
        draw = np.zeros((b, h, w, TOTAL_CHANNELS))
        scale = self.scales()
        for name, g in grads.items():
            sl = self.slices[name]
            y = pred[name]
            if name in SOFTMAX_HEADS:
                draw[..., sl] = y * (g - np.sum(g * y, -1, keepdims=True))
            elif name in SIGMOID_HEADS:
                draw[..., sl] = g * y * (1.0 - y)
            else:
                draw[..., sl] = g * scale[sl]
        return draw


assert set(LINEAR_SCALES) == set(LINEAR_HEADS)


# -- optimiser -----------------------------------------------------------------------

class Adam:
    def __init__(self, params: list, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# -- checkpoints -----------------------------------------------------------------------

def save_checkpoint(net: ToyNet, path) -> None:
    """Magic, JSON architecture, tensor count and shapes, then a float32 blob."""
    params = net.params()
    cfg = json.dumps(net.cfg.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path) -> ToyNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    pos = 8
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    cfg = NetConfig.from_dict(json.loads(data[pos:pos + n].decode()))
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    shapes = []
    for _ in range(count):
        (nd,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shapes.append(struct.unpack_from(f"<{nd}I", data, pos))
        pos += 4 * nd
    net = ToyNet(cfg)
    params = net.params()
    if [tuple(p.shape) for p in params] != [tuple(s) for s in shapes]:
        raise ValueError(f"{path}: parameter shapes do not match the architecture")
    for p, shape in zip(params, shapes):
        size = int(np.prod(shape))
        p[...] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return net
