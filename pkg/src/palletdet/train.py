"""Training the toy network with DSSL on synthetic scenes, and inference."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .bdt import BdtParams
from .dense import CERTAINTY_HEADS, HEAD_NAMES, DenseTargets
from .losses import LossParams, certainty, dssl, error_stats
from .postproc import Thresholds, detect
from .synth import AugmentationConfig, SynthConfig, apply_augmentation, derive_dense_targets, \
    rasterize, sample_stack
from .toynet import Adam, HeadDecoder, NetConfig, SampleContext, ToyNet

log = logging.getLogger(__name__)

DEPTH_SCALE = 0.5
PRIOR_MEAN = 0.3
PRIOR_SCALE = 0.1
IN_CHANNELS = 8
# heads trained on every pixel; all others only on instance pixels
DENSE_HEADS = ("class", "bdt", "certainty_class")


def build_inputs(intensity, depth, validity, ctx: SampleContext) -> np.ndarray:
    """(H, W, 8): intensity, depth, validity, tiled prior, pixel coordinates."""
    intensity = np.asarray(intensity, dtype=np.float32)
    h, w = intensity.shape
    valid = np.asarray(validity, dtype=np.float32)
    d = np.where(valid > 0, (np.asarray(depth, dtype=np.float32) - ctx.reference_depth) / DEPTH_SCALE, 0.0)
    x = np.zeros((h, w, IN_CHANNELS), dtype=np.float32)
    x[..., 0] = intensity
    x[..., 1] = d
    x[..., 2] = valid
    if ctx.prior is not None:
        x[..., 3:6] = (np.asarray(ctx.prior, dtype=np.float32) - PRIOR_MEAN) / PRIOR_SCALE
    x[..., 6] = np.linspace(-1.0, 1.0, w, dtype=np.float32)[None, :]
    x[..., 7] = np.linspace(-1.0, 1.0, h, dtype=np.float32)[:, None]
    return x


@dataclass
class TrainingSet:
    inputs: np.ndarray            # (N, H, W, C)
    targets: DenseTargets         # batch axis N, on the output grid
    contexts: list
    scenes: list

    def __len__(self) -> int:
        return len(self.contexts)

    def batch(self, idx):
        idx = np.asarray(idx)
        t = self.targets
        heads = {n: t.heads[n][idx] for n in HEAD_NAMES}
        tb = DenseTargets(heads, instance_ids=t.instance_ids[idx], rotation_alt=t.rotation_alt[idx],
                          rows=t.rows, cols=t.cols, image_size=t.image_size)
        return self.inputs[idx], tb, [self.contexts[i] for i in idx]


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_sample(synth: SynthConfig, rng: np.random.Generator, aug: AugmentationConfig,
                bdt_params: BdtParams, stride: int = ToyNet.STRIDE):
    scene = sample_stack(synth, rng)
    rast = rasterize(scene)
    scene.instances = rast.instances
    intensity, depth, validity = apply_augmentation(rast.intensity, rast.depth, aug, rng)
    ctx = SampleContext(scene.camera, scene.prior_size)
    x = build_inputs(intensity, depth, validity, ctx)
    targets = derive_dense_targets(scene, rast, bdt_params, stride)
    return scene, x, targets, ctx, (intensity, depth, validity)


def generate_dataset(synth: SynthConfig, n: int, seed: int, aug: AugmentationConfig = AugmentationConfig(),
                     bdt_params: BdtParams = BdtParams(4.0), first_index: int = 0) -> TrainingSet:
    """``n`` scenes; scene ``i`` draws from the stream ``(seed, first_index + i)``."""
    if n < 1:
        raise ValueError("need at least one scene")
    xs, ts, ctxs, scenes = [], [], [], []
    for i in range(first_index, first_index + n):
        scene, x, t, ctx, _ = make_sample(synth, scene_rng(seed, i), aug, bdt_params)
        xs.append(x)
        ts.append(t)
        ctxs.append(ctx)
        scenes.append(scene)
    return TrainingSet(np.stack(xs), DenseTargets.concat(ts), ctxs, scenes)


# -- objective -------------------------------------------------------------------

@dataclass
class Objective:
    total: float
    losses: dict           # head -> DSSL value
    mean_abs: dict         # head -> masked mean absolute error
    grads: dict            # head -> dL/d(head output)


def _head_mask(name: str, fg: np.ndarray):
    return None if name in DENSE_HEADS else fg


def _masked_mean(l: np.ndarray, mask) -> float:
    return error_stats(l, mask).mean_abs


def objective(pred, targets: DenseTargets, p: LossParams = LossParams(), weights: dict | None = None,
              frozen: dict | None = None):
    """Head-weighted DSSL sum and its gradient w.r.t. every head output.

    Everything the training graph treats as constant (batch mean errors,
    certainty targets, the symmetry variant picked per pixel) is returned in
    ``frozen``; passing it back in reproduces the same constants, which is
    what finite-difference checks need.
    """
    weights = weights or {}
    fg = targets.instance_ids > 0
    new = frozen is None
    frozen = {"stats": {}, "certainty": {}} if new else frozen

    if new:
        a = np.abs(pred["rotation"] - targets["rotation"]).sum(-1)
        b = np.abs(pred["rotation"] - targets.rotation_alt).sum(-1)
        frozen["rotation_alt"] = b < a
    rot_target = np.where(frozen["rotation_alt"][..., None], targets.rotation_alt, targets["rotation"])

    if new:
        for cert, source in CERTAINTY_HEADS.items():
            l = np.abs(pred[source] - targets[source]).mean(-1, keepdims=True)
            mask = _head_mask(cert, fg)
            frozen["certainty"][cert] = certainty(l, error_stats(l, mask), p)

    losses, mean_abs, grads = {}, {}, {}
    total = 0.0
    for name in HEAD_NAMES:
        if name == "rotation":
            y = rot_target
        elif name in CERTAINTY_HEADS:
            y = frozen["certainty"][name]
        else:
            y = targets[name]
        mask = _head_mask(name, fg)
        y_hat = pred[name]
        if new:
            frozen["stats"][name] = error_stats(np.abs(y_hat - y), mask)
        out = dssl(y, y_hat, p, mask=mask, stats=frozen["stats"][name])
        w = float(weights.get(name, 1.0))
        losses[name] = out.value
        mean_abs[name] = _masked_mean(np.abs(y_hat - y), mask)
        grads[name] = w * out.grad
        total += w * out.value
    return Objective(total, losses, mean_abs, grads), frozen


# -- training loop -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 12
    lr0: float = 1e-3
    milestones: tuple = (2250, 3000, 3750, 4500)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossParams = LossParams()
    head_weights: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be increasing")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch size must be positive")
        unknown = set(self.head_weights) - set(HEAD_NAMES)
        if unknown:
            raise ValueError(f"unknown heads in head_weights: {sorted(unknown)}")

    def lr_at(self, iteration: int) -> float:
        """Learning rate used for ``iteration`` (halved once per milestone reached)."""
        return self.lr0 * 0.5 ** sum(iteration >= m for m in self.milestones)

    @classmethod
    def scaled(cls, iterations: int, **kw) -> "TrainConfig":
        """Milestones at 45/60/75/90 % of the run."""
        ms = tuple(int(round(iterations * f)) for f in (0.45, 0.6, 0.75, 0.9))
        return cls(iterations=iterations, milestones=ms, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossParams(**d["loss"])
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return cls(**d)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def columns(self) -> list:
        return (["iteration", "lr", "loss_total"] + [f"loss_{h}" for h in HEAD_NAMES]
                + [f"mean_abs_{h}" for h in HEAD_NAMES])

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, self.columns(), lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


def forward_heads(net: ToyNet, decoder: HeadDecoder, x, contexts):
    raw = net.forward(x)
    anchors = decoder.anchors(contexts, raw.shape[1:3]) if contexts is not None else None
    return decoder.decode(raw, anchors)


def train_step(net, decoder, x, targets, contexts, p, weights):
    """Forward, objective and backward; gradients are left in ``net``."""
    pred = forward_heads(net, decoder, x, contexts)
    bad = [n for n in HEAD_NAMES if not np.all(np.isfinite(pred[n]))]
    if bad:
        raise FloatingPointError(f"non-finite network output in {bad}")
    obj, _ = objective(pred, targets, p, weights)
    net.zero_grad()
    net.backward(decoder.backward(pred, obj.grads))
    return obj


def train(net: ToyNet, data: TrainingSet, cfg: TrainConfig, decoder: HeadDecoder | None = None,
          callback=None) -> TrainLog:
    """Adam on mini-batches drawn without replacement per epoch.

    Raises FloatingPointError when the loss stops being finite.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    decoder = decoder or HeadDecoder(ToyNet.STRIDE)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    log_ = TrainLog()
    order, pos = rng.permutation(len(data)), 0
    bs = min(cfg.batch_size, len(data))
    for it in range(cfg.iterations):
        if pos + bs > len(order):
            order, pos = rng.permutation(len(data)), 0
        idx = order[pos:pos + bs]
        pos += bs
        x, t, ctx = data.batch(idx)
        obj = train_step(net, decoder, x, t, ctx, cfg.loss, cfg.head_weights)
        if not np.isfinite(obj.total):
            bad = {k: v for k, v in obj.losses.items() if not np.isfinite(v)}
            raise FloatingPointError(f"non-finite loss at iteration {it}: {bad}")
        lr = cfg.lr_at(it)
        opt.step(net.grads(), lr)
        row = {"iteration": it, "lr": lr, "loss_total": float(obj.total)}
        row.update({f"loss_{h}": float(v) for h, v in obj.losses.items()})
        row.update({f"mean_abs_{h}": float(v) for h, v in obj.mean_abs.items()})
        log_.rows.append(row)
        if callback is not None:
            callback(it, row, net)
        if it % 500 == 0:
            log.info("iteration %d lr %.2e loss %.4f class mae %.4f", it, lr, obj.total,
                     obj.mean_abs["class"])
    return log_


# -- inference -------------------------------------------------------------------

def predict(net: ToyNet, x, contexts, decoder: HeadDecoder | None = None):
    decoder = decoder or HeadDecoder(ToyNet.STRIDE)
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    return forward_heads(net, decoder, x, contexts)


def predict_and_detect(net: ToyNet, x, ctx: SampleContext, pallet_frame,
                       thresholds: Thresholds = Thresholds(), pose_source: str = "direct") -> list:
    """Run the network on one sample and post-process its dense output."""
    x = np.asarray(x)
    pred = predict(net, x, [ctx])
    h, w = x.shape[-3:-1]
    return detect(pred, pallet_frame, thresholds, stride=ToyNet.STRIDE, image_size=(h, w),
                  pose_source=pose_source)


def default_net(seed: int = 0) -> ToyNet:
    return ToyNet(NetConfig(in_channels=IN_CHANNELS), seed=seed)
