"""Per-pixel multi-head outputs shared by targets, the network and decoding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# head name -> channel count, in network output order
HEADS = {
    "class": 3,              # background, box, interlayer
    "orientation": 2,        # short, long face towards the camera
    "prior_confidence": 1,
    "visibility": 1,
    "keypoints_2d": 16,      # (du, dv) per corner, normalised by image size
    "keypoints_3d": 24,      # camera frame, metres
    "position": 3,           # box centre, camera frame, metres
    "rotation": 9,           # box rotation in camera frame, row-major
    "front_distance": 1,     # depth of the front face centre, metres
    "dims_slh": 3,
    "dims_wdh": 3,
    "bdt": 1,
    "certainty_class": 1,
    "certainty_orientation": 1,
    "certainty_dims": 1,
}
HEAD_NAMES = tuple(HEADS)
TOTAL_CHANNELS = sum(HEADS.values())
SOFTMAX_HEADS = ("class", "orientation")
SIGMOID_HEADS = ("prior_confidence", "visibility", "bdt",
                 "certainty_class", "certainty_orientation", "certainty_dims")
LINEAR_HEADS = tuple(h for h in HEAD_NAMES if h not in SOFTMAX_HEADS + SIGMOID_HEADS)
CERTAINTY_HEADS = {"certainty_class": "class",
                   "certainty_orientation": "orientation",
                   "certainty_dims": "dims_slh"}
CLASS_NAMES = ("background", "box", "interlayer")
ORIENTATIONS = ("short", "long")


def head_slices() -> dict:
    out, start = {}, 0
    for name, k in HEADS.items():
        out[name] = slice(start, start + k)
        start += k
    return out


@dataclass
class DensePrediction:
    """One ``(B, H, W, K)`` array per head; all heads share B, H and W."""
    heads: dict

    def __post_init__(self):
        shape = None
        for name, k in HEADS.items():
            if name not in self.heads:
                raise ValueError(f"missing head {name!r}")
            a = self.heads[name]
            if a.ndim != 4 or a.shape[-1] != k:
                raise ValueError(f"head {name!r} must be (B,H,W,{k}), got {a.shape}")
            if shape is None:
                shape = a.shape[:3]
            elif a.shape[:3] != shape:
                raise ValueError("heads disagree on (B, H, W)")

    def __getitem__(self, name) -> np.ndarray:
        return self.heads[name]

    @property
    def shape(self) -> tuple:
        return self.heads["class"].shape[:3]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.heads[n] for n in HEAD_NAMES], axis=-1)

    @classmethod
    def from_stacked(cls, a) -> "DensePrediction":
        return cls({n: a[..., s] for n, s in head_slices().items()})

    def sample(self, b: int) -> "DensePrediction":
        return DensePrediction({n: v[b:b + 1] for n, v in self.heads.items()})

    @classmethod
    def concat(cls, preds) -> "DensePrediction":
        return cls({n: np.concatenate([p.heads[n] for p in preds]) for n in HEAD_NAMES})


@dataclass
class DenseTargets(DensePrediction):
    """Ground truth in the prediction layout plus what training needs besides.

    ``instance_ids`` is the id-map sampled on the target grid,
    ``rotation_alt`` the rotation target under the 180-degree box symmetry,
    ``rows``/``cols`` the full-resolution pixel each grid cell samples.
    """
    instance_ids: np.ndarray = None
    rotation_alt: np.ndarray = None
    rows: np.ndarray = None
    cols: np.ndarray = None
    image_size: tuple = (0, 0)  # (height, width) at full resolution
    extras: dict = field(default_factory=dict)

    @property
    def foreground(self) -> np.ndarray:
        return self.instance_ids > 0

    @property
    def box_mask(self) -> np.ndarray:
        return self.heads["class"][..., 1] > 0.5

    @classmethod
    def concat(cls, targets) -> "DenseTargets":
        t0 = targets[0]
        return cls({n: np.concatenate([t.heads[n] for t in targets]) for n in HEAD_NAMES},
                   instance_ids=np.concatenate([t.instance_ids for t in targets]),
                   rotation_alt=np.concatenate([t.rotation_alt for t in targets]),
                   rows=t0.rows, cols=t0.cols, image_size=t0.image_size)
