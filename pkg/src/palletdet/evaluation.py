"""Detection benchmark: tolerance matching and precision / recall / f-measure.

Positions are compared in the pallet frame, axis by axis.  Only boxes of
the topmost pallet layer are scored; interlayer detections are ignored.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import RigidTransform

POSE_SOURCES = ("direct", "keypoints", "front_bottom")
MIN_VISIBILITY = 0.25


@dataclass(frozen=True)
class MatchCriteria:
    d_max: tuple = (0.025, 0.025, 0.025)   # metres, pallet x / y / z
    require_orientation: bool = True

    def __post_init__(self):
        if len(self.d_max) != 3 or min(self.d_max) <= 0:
            raise ValueError("d_max needs three positive components")
        object.__setattr__(self, "d_max", tuple(float(v) for v in self.d_max))

    def to_dict(self) -> dict:
        return {"d_max": list(self.d_max), "require_orientation": self.require_orientation,
                "frame": "pallet"}


@dataclass
class EvalItem:
    """A detection or ground-truth box reduced to what the matcher needs."""
    position: np.ndarray       # pallet frame
    orientation: str
    score: float = 1.0
    orientation_tie: bool = False


def _orientation_ok(det: EvalItem, gt: EvalItem) -> bool:
    return gt.orientation_tie or det.orientation == gt.orientation


def match_detections(dets: list, gts: list, criteria: MatchCriteria = MatchCriteria()):
    """Greedy matching in descending score order.

    Each detection takes the nearest free ground truth that lies within the
    per-axis limits (and has the same orientation class, if required).
    Returns ``(tp, fp, fn, assignment)`` with ``assignment`` a list of
    ``(det_index, gt_index)`` pairs.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    limit = np.asarray(criteria.d_max)
    gt_pos = np.array([g.position for g in gts], dtype=np.float64).reshape(-1, 3)
    free = np.ones(len(gts), dtype=bool)
    assignment = []
    for i in order:
        if not free.any():
            break
        delta = gt_pos - np.asarray(dets[i].position, dtype=np.float64)
        ok = free & np.all(np.abs(delta) <= limit, axis=1)
        if criteria.require_orientation:
            ok &= np.array([_orientation_ok(dets[i], g) for g in gts], dtype=bool)
        if not ok.any():
            continue
        dist = np.where(ok, np.linalg.norm(delta, axis=1), np.inf)
        j = int(np.argmin(dist))
        free[j] = False
        assignment.append((i, j))
    tp = len(assignment)
    return tp, len(dets) - tp, len(gts) - tp, assignment


def f_measure(tp: int, fp: int, fn: int) -> tuple:
    """(precision, recall, f).  Empty denominators count as perfect."""
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


@dataclass
class Metrics:
    product_id: str
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 1.0
    recall: float = 1.0
    f_measure: float = 1.0

    def add(self, tp: int, fp: int, fn: int) -> None:
        self.tp += tp
        self.fp += fp
        self.fn += fn
        self.precision, self.recall, self.f_measure = f_measure(self.tp, self.fp, self.fn)


@dataclass
class SourceReport:
    per_product: list
    aggregate: Metrics


@dataclass
class EvalReport:
    criteria: MatchCriteria
    sources: dict = field(default_factory=dict)   # pose source -> SourceReport

    def f(self, source: str = "direct") -> float:
        return self.sources[source].aggregate.f_measure

    def to_dict(self) -> dict:
        return {
            "criteria": self.criteria.to_dict(),
            "pose_sources": {
                name: {"per_product": [asdict(m) for m in rep.per_product],
                       "aggregate": asdict(rep.aggregate)}
                for name, rep in self.sources.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["pose_source", "product_id", "tp", "fp", "fn", "precision", "recall", "f_measure"]
        writer = csv.DictWriter(buf, cols, lineterminator="\n")
        writer.writeheader()
        for name, rep in self.sources.items():
            for m in rep.per_product + [rep.aggregate]:
                writer.writerow({"pose_source": name, **asdict(m)})
        return buf.getvalue()


@dataclass
class GroundTruthSample:
    sample_id: str
    product_id: str
    scene: object          # synth.Scene


def ground_truth_items(scene, source: str = "direct", min_visibility: float = MIN_VISIBILITY):
    """Top-layer boxes visible enough to count, plus the layer's floor height."""
    top = scene.top_layer
    frame: RigidTransform = scene.pallet_frame
    items, floors = [], []
    for inst in scene.instances:
        if inst.spec.cls != "box" or inst.layer != top:
            continue
        floors.append(inst.position[2] - inst.dims[2] / 2)
        if inst.visibility < min_visibility:
            continue
        if source == "front_bottom":
            pos = frame.inverse_apply(inst.keypoints_3d[[2, 3]].mean(0))
        else:
            pos = np.asarray(inst.position, dtype=np.float64)
        items.append(EvalItem(pos, inst.orientation, 1.0, inst.orientation_tie))
    floor = min(floors) if floors else -np.inf
    return items, floor


def detection_items(dets: list, frame: RigidTransform, source: str = "direct", floor: float = -np.inf):
    """Box detections whose centre lies above ``floor`` (pallet z)."""
    items = []
    for d in dets:
        if d.cls != "box":
            continue
        center = d.position_kp if source == "keypoints" else d.position
        if frame.inverse_apply(center)[2] < floor:
            continue
        pos = frame.inverse_apply(d.source_position(source))
        items.append(EvalItem(pos, d.orientation, d.score))
    return items


def evaluate_sample(dets: list, scene, criteria: MatchCriteria, source: str = "direct"):
    gts, floor = ground_truth_items(scene, source)
    items = detection_items(dets, scene.pallet_frame, source, floor)
    return match_detections(items, gts, criteria)


def evaluate_dataset(results: dict, groundtruths: list, criteria: MatchCriteria = MatchCriteria(),
                     pose_sources=POSE_SOURCES) -> EvalReport:
    """Score ``results`` (sample id -> detections) against ground truth."""
    ids = [g.sample_id for g in groundtruths]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ground-truth sample ids")
    if set(results) != set(ids):
        missing = sorted(set(ids) - set(results))
        extra = sorted(set(results) - set(ids))
        raise ValueError(f"result/ground-truth mismatch: missing {missing}, unexpected {extra}")
    for source in pose_sources:
        if source not in POSE_SOURCES:
            raise ValueError(f"unknown pose source {source!r}")
    report = EvalReport(criteria)
    for source in pose_sources:
        per = {}
        total = Metrics("ALL")
        for g in groundtruths:
            tp, fp, fn, _ = evaluate_sample(results[g.sample_id], g.scene, criteria, source)
            per.setdefault(g.product_id, Metrics(g.product_id)).add(tp, fp, fn)
            total.add(tp, fp, fn)
        report.sources[source] = SourceReport([per[k] for k in sorted(per)], total)
    return report
