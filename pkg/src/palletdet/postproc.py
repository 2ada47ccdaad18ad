"""From dense predictions to sorted, pose-resolved detections."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .dense import CLASS_NAMES, ORIENTATIONS, DensePrediction
from .geometry import CORNER_SIGNS, RigidTransform, box_rotation_variants, rotation_angle

LAYER_TOLERANCE = 0.02
GROUP_FACTOR = 0.5
MIN_DIM = 1e-3


@dataclass(frozen=True)
class Thresholds:
    t_class: float = 0.5
    t_vis: float = 0.25
    t_bdt: float = 0.5
    t_cert: float = 0.3

    def __post_init__(self):
        for name in ("t_class", "t_vis", "t_bdt", "t_cert"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class Candidate:
    pixel: tuple                 # (row, col) on the prediction grid
    cls: str
    orientation: str
    score: float
    position: np.ndarray         # camera frame
    rotation: np.ndarray
    dims: np.ndarray             # (short, long, height)
    keypoints_3d: np.ndarray
    visibility: float
    prior_confidence: float
    bdt: float
    certainties: tuple
    class_confidence: float = 1.0
    keypoints_2d: np.ndarray = None   # (col, row) image pixels
    grid_index: int = 0               # row-major index on the prediction grid


@dataclass
class Detection(Candidate):
    group_size: int = 1
    pose_source: str = "direct"
    pick_rank: int = 0
    position_kp: np.ndarray = None
    rotation_kp: np.ndarray = None
    dims_kp: np.ndarray = None
    position_pallet: np.ndarray = None

    @property
    def front_bottom(self) -> np.ndarray:
        """Midpoint of the bottom-left and bottom-right front corners."""
        return self.keypoints_3d[[2, 3]].mean(0)

    def source_position(self, source: str) -> np.ndarray:
        if source == "direct":
            return self.position
        if source == "keypoints":
            return self.position_kp
        if source == "front_bottom":
            return self.front_bottom
        raise ValueError(f"unknown pose source {source!r}")

    def to_dict(self, pallet_frame: RigidTransform | None = None, pose_source: str | None = None) -> dict:
        source = pose_source or self.pose_source
        pos = self.source_position(source) if source != "front_bottom" else self.position
        rot = self.rotation_kp if source == "keypoints" else self.rotation
        dims = self.dims_kp if source == "keypoints" else self.dims
        pallet = pallet_frame.inverse_apply(pos) if pallet_frame is not None else self.position_pallet
        return {
            "class": self.cls, "orientation": self.orientation,
            "position_pallet": None if pallet is None else np.asarray(pallet).tolist(),
            "position_camera": np.asarray(pos).tolist(),
            "rotation": np.asarray(rot).reshape(-1).tolist(),
            "dims_slh": np.asarray(dims).tolist(),
            "visibility": self.visibility, "prior_confidence": self.prior_confidence,
            "score": self.score, "pose_source": source, "pick_rank": self.pick_rank,
        }


def project_to_so3(m) -> np.ndarray:
    """Nearest rotation(s) to 3x3 matrices given as (..., 9) or (..., 3, 3)."""
    m = np.asarray(m, dtype=np.float64)
    m = m.reshape(m.shape[:-1] + (3, 3)) if m.shape[-1] == 9 else m
    u, _, vt = np.linalg.svd(m)
    d = np.where(np.linalg.det(u @ vt) < 0, -1.0, 1.0)
    u = u.copy()
    u[..., :, 2] *= d[..., None]
    return u @ vt


def decode_candidates(pred: DensePrediction, thresholds: Thresholds = Thresholds(),
                      stride: int = 1, image_size: tuple | None = None, b: int = 0) -> list:
    """Filter the dense output of batch item ``b`` into candidates.

    Grid cell (i, j) corresponds to image pixel (stride*i, stride*j);
    ``image_size`` (height, width) scales the relative 2-D keypoints.
    """
    t = thresholds
    cls_p = pred["class"][b].astype(np.float64)
    label = cls_p.argmax(-1)
    conf = cls_p.max(-1)
    vis = pred["visibility"][b, ..., 0]
    bdt = pred["bdt"][b, ..., 0]
    certs = np.stack([pred[n][b, ..., 0] for n in
                      ("certainty_class", "certainty_orientation", "certainty_dims")], -1)
    keep = (label != 0) & (conf >= t.t_class) & (vis >= t.t_vis) & (bdt >= t.t_bdt) \
        & (certs.min(-1) >= t.t_cert)
    rows, cols = np.nonzero(keep)
    gw = cls_p.shape[1]
    if image_size is None:
        image_size = (cls_p.shape[0] * stride, gw * stride)
    ih, iw = image_size
    sel = (b, rows, cols)
    rel = pred["keypoints_2d"][sel].reshape(-1, 8, 2).astype(np.float64)
    kp2 = rel * np.array([iw, ih]) + np.stack([cols, rows], -1)[:, None, :] * stride
    rots = project_to_so3(pred["rotation"][sel])
    dims = np.maximum(pred["dims_slh"][sel].astype(np.float64), MIN_DIM)
    kp3 = pred["keypoints_3d"][sel].reshape(-1, 8, 3).astype(np.float64)
    position = pred["position"][sel].astype(np.float64)
    orient = pred["orientation"][sel].argmax(-1)
    prior = pred["prior_confidence"][sel][:, 0]
    out = []
    for k, (r, c) in enumerate(zip(rows, cols)):
        cert = tuple(float(v) for v in certs[r, c])
        out.append(Candidate(
            pixel=(int(r), int(c)), cls=CLASS_NAMES[label[r, c]],
            orientation=ORIENTATIONS[orient[k]],
            score=float(conf[r, c] * bdt[r, c] * min(cert)),
            position=position[k], rotation=rots[k], dims=dims[k], keypoints_3d=kp3[k],
            visibility=float(vis[r, c]), prior_confidence=float(prior[k]),
            bdt=float(bdt[r, c]), certainties=cert, class_confidence=float(conf[r, c]),
            keypoints_2d=kp2[k], grid_index=int(r * gw + c)))
    return out


def group_candidates(cands: list) -> list:
    """Connected components of the "closer than half the smaller minimum
    dimension" relation; boxes and interlayers never share a group."""
    groups = []
    for cls in sorted({c.cls for c in cands}):
        members = [c for c in cands if c.cls == cls]
        pos = np.array([c.position for c in members])
        mind = np.array([c.dims.min() for c in members])
        pairs = cKDTree(pos).query_pairs(GROUP_FACTOR * mind.max(), output_type="ndarray")
        i, j = pairs[:, 0], pairs[:, 1]
        linked = np.linalg.norm(pos[i] - pos[j], axis=1) < GROUP_FACTOR * np.minimum(mind[i], mind[j])
        n = len(members)
        graph = coo_matrix((np.ones(linked.sum()), (i[linked], j[linked])), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        comps = {}
        for k, lab in enumerate(labels):
            comps.setdefault(lab, []).append(members[k])
        groups.extend(sorted(comps.values(), key=lambda g: min(c.grid_index for c in g)))
    return groups


def pose_from_keypoints(kps_3d):
    """Centre, keypoint-frame rotation and (short, long, height) from 8 corners.

    The rotation is the Procrustes fit of the corner template, scaled by the
    averaged edge lengths, onto the keypoints.
    """
    k = np.asarray(kps_3d, dtype=np.float64).reshape(8, 3)
    centroid = k.mean(0)
    centered = k - centroid
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[-1] / np.sqrt(8) < 1e-6:
        raise ValueError("degenerate (coplanar) keypoints")
    front, back = k[:4], k[4:]
    width = np.mean([np.linalg.norm(front[1] - front[0]), np.linalg.norm(front[2] - front[3]),
                     np.linalg.norm(back[1] - back[0]), np.linalg.norm(back[2] - back[3])])
    height = np.mean([np.linalg.norm(front[0] - front[3]), np.linalg.norm(front[1] - front[2]),
                      np.linalg.norm(back[0] - back[3]), np.linalg.norm(back[1] - back[2])])
    depth = np.mean(np.linalg.norm(back - front, axis=1))
    template = CORNER_SIGNS * (np.array([width, depth, height]) / 2.0)
    h = template.T @ centered
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    dims = np.array([min(width, depth), max(width, depth), height])
    return centroid, rotation, dims


def keypoint_box_rotation(kp_rotation, kps_3d, reference=None) -> np.ndarray:
    """Box-frame rotation from a keypoint-frame rotation, picking the symmetric
    variant closest to ``reference`` when given."""
    k = np.asarray(kps_3d).reshape(8, 3)
    width = np.linalg.norm(k[1] - k[0])
    depth = np.linalg.norm(k[4] - k[0])
    front_axis = 0 if width >= depth else 1
    variants = box_rotation_variants(kp_rotation, front_axis)
    if reference is None:
        return variants[0]
    return min(variants, key=lambda r: rotation_angle(r, reference))


def select_representative(group: list) -> Detection:
    if not group:
        raise ValueError("cannot select from an empty group")
    pos = np.array([c.position for c in group])
    dist = np.linalg.norm(pos - pos.mean(0), axis=1)
    best = min(range(len(group)),
               key=lambda i: (round(float(dist[i]), 12), -group[i].score, group[i].grid_index))
    c = group[best]
    try:
        p_kp, r_kp, d_kp = pose_from_keypoints(c.keypoints_3d)
        r_box = keypoint_box_rotation(r_kp, c.keypoints_3d, c.rotation)
    except ValueError:
        p_kp, r_box, d_kp = c.keypoints_3d.mean(0), c.rotation, c.dims
    fields_ = {f: getattr(c, f) for f in Candidate.__dataclass_fields__}
    return Detection(**fields_, group_size=len(group), position_kp=p_kp,
                     rotation_kp=r_box, dims_kp=d_kp)


def _layers(heights):
    """Layer index per detection (0 = top), heights within tolerance merged."""
    order = np.argsort(-np.asarray(heights), kind="stable")
    layer = np.zeros(len(heights), dtype=int)
    current, top = -1, None
    for i in order:
        if top is None or heights[i] < top - LAYER_TOLERANCE:
            current += 1
            top = heights[i]
        layer[i] = current
    return layer


def sort_detections(dets: list, pallet_frame: RigidTransform, pose_source: str = "direct") -> list:
    """Top to bottom, then near to far; assigns ``pick_rank`` 1..N."""
    if not dets:
        return []
    pos_cam = np.array([d.source_position(pose_source) for d in dets])
    pos_pal = pallet_frame.inverse_apply(pos_cam)
    layers = _layers(pos_pal[:, 2])
    order = sorted(range(len(dets)), key=lambda i: (layers[i], pos_cam[i, 2], dets[i].grid_index))
    out = []
    for rank, i in enumerate(order, start=1):
        out.append(replace(dets[i], pick_rank=rank, pose_source=pose_source,
                           position_pallet=pallet_frame.inverse_apply(dets[i].position)))
    return out


def topmost_layer(dets: list, pallet_frame: RigidTransform | None = None,
                  pose_source: str = "direct") -> list:
    """Detections within the layer tolerance of the highest one."""
    if not dets:
        return []
    if pallet_frame is None:
        heights = np.array([d.position_pallet[2] for d in dets])
    else:
        heights = pallet_frame.inverse_apply(
            np.array([d.source_position(pose_source) for d in dets]))[:, 2]
    top = heights.max()
    return [d for d, h in zip(dets, heights) if h >= top - LAYER_TOLERANCE]


def detect(pred: DensePrediction, pallet_frame: RigidTransform, thresholds: Thresholds = Thresholds(),
           stride: int = 1, image_size: tuple | None = None, b: int = 0,
           pose_source: str = "direct") -> list:
    cands = decode_candidates(pred, thresholds, stride, image_size, b)
    dets = [select_representative(g) for g in group_candidates(cands)]
    return sort_detections(dets, pallet_frame, pose_source)
