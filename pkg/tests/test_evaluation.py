import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from palletdet.evaluation import (EvalItem, GroundTruthSample, MatchCriteria, evaluate_dataset, f_measure,
                                  ground_truth_items, match_detections)
from palletdet.postproc import Detection
from palletdet.synth import SynthConfig, rasterize, sample_stack


def item(x, y=0.0, z=0.0, orientation="short", score=1.0, tie=False):
    return EvalItem(np.array([x, y, z], float), orientation, score, tie)


def test_criteria_validation():
    with pytest.raises(ValueError):
        MatchCriteria((0.025, 0.0, 0.025))
    with pytest.raises(ValueError):
        MatchCriteria((0.025, 0.025))
    assert MatchCriteria().to_dict()["d_max"] == [0.025] * 3


def test_match_examples():
    assert match_detections([item(0)], [item(0)])[:3] == (1, 0, 0)
    assert match_detections([item(0), item(0.001)], [item(0)])[:3] == (1, 1, 0)
    assert match_detections([item(0.03)], [item(0)])[:3] == (0, 1, 1)
    assert match_detections([item(0.025)], [item(0)])[:3] == (1, 0, 0)
    assert match_detections([], [item(0)])[:3] == (0, 0, 1)
    assert match_detections([item(0)], [])[:3] == (0, 1, 0)


def test_orientation_rules():
    wrong = [item(0, orientation="long")]
    assert match_detections(wrong, [item(0)])[:3] == (0, 1, 1)
    assert match_detections(wrong, [item(0)], MatchCriteria(require_orientation=False))[:3] == (1, 0, 0)
    assert match_detections(wrong, [item(0, tie=True)])[:3] == (1, 0, 0)


def test_higher_score_matches_first():
    dets = [item(0.02, score=0.2), item(0.01, score=0.9)]
    tp, fp, fn, assignment = match_detections(dets, [item(0)])
    assert (tp, fp, fn) == (1, 1, 0) and assignment == [(1, 0)]


def test_nearest_free_ground_truth():
    gts = [item(0.02), item(0.0)]
    _, _, _, assignment = match_detections([item(0.004)], gts)
    assert assignment == [(0, 1)]


def test_f_measure_examples():
    assert f_measure(10, 0, 0) == (1.0, 1.0, 1.0)
    assert f_measure(5, 5, 5) == (0.5, 0.5, 0.5)
    p, r, f = f_measure(9, 1, 3)
    assert abs(p - 0.9) < 1e-12 and abs(r - 0.75) < 1e-12 and abs(f - 9 / 11) < 1e-12
    assert f_measure(0, 0, 4) == (1.0, 0.0, 0.0)


def random_layout(rng, n_gt, d_max):
    """Ground truths on a jittered lattice with spacing well above 2*d_max."""
    spacing = 2 * max(d_max) + 0.02
    cells = rng.choice(100, size=n_gt, replace=False)
    gts = [item(spacing * (c % 10), spacing * (c // 10), 0.0, rng.choice(["short", "long"]))
           for c in cells]
    dets = []
    for g in gts:
        for _ in range(int(rng.integers(0, 3))):
            off = rng.uniform(-1.6, 1.6, 3) * np.asarray(d_max)
            orient = g.orientation if rng.random() < 0.8 else ("long" if g.orientation == "short" else "short")
            dets.append(EvalItem(g.position + off, orient, float(rng.random())))
    for _ in range(int(rng.integers(0, 4))):
        dets.append(item(*rng.uniform(-0.5, 2.0, 3), score=float(rng.random())))
    return dets, gts


def optimal_tp(dets, gts, criteria):
    if not dets or not gts:
        return 0
    ok = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            within = np.all(np.abs(d.position - g.position) <= criteria.d_max)
            orient = g.orientation_tie or d.orientation == g.orientation
            ok[i, j] = within and orient
    rows, cols = linear_sum_assignment(-ok)
    return int(ok[rows, cols].sum())


def test_greedy_equals_optimal_when_separated():
    rng = np.random.default_rng(0)
    criteria = MatchCriteria()
    for _ in range(1000):
        dets, gts = random_layout(rng, int(rng.integers(1, 12)), criteria.d_max)
        tp, fp, fn, _ = match_detections(dets, gts, criteria)
        assert tp == optimal_tp(dets, gts, criteria)
        assert tp + fn == len(gts) and tp + fp == len(dets)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tp_monotone_in_tolerance(seed):
    rng = np.random.default_rng(seed)
    gts = [item(*rng.uniform(0, 1, 3), orientation=rng.choice(["short", "long"])) for _ in range(6)]
    dets = [item(*(g.position + rng.normal(0, 0.03, 3)), orientation=g.orientation, score=float(rng.random()))
            for g in gts for _ in range(int(rng.integers(0, 3)))]
    tight = match_detections(dets, gts, MatchCriteria((0.025,) * 3))[0]
    loose = match_detections(dets, gts, MatchCriteria((0.05,) * 3))[0]
    assert loose >= tight


# -- dataset level ------------------------------------------------------------------

def scenes(n=4):
    cfg = SynthConfig(layers=(2, 3)).at_scale(0.5)
    out = []
    for i in range(n):
        scene = sample_stack(cfg, np.random.default_rng([5, i]))
        scene.instances = rasterize(scene).instances
        out.append(scene)
    return out


def perfect_detections(scene, drop=0):
    """Detections sitting exactly on the top-layer ground truth."""
    gts, _ = ground_truth_items(scene)
    frame = scene.pallet_frame
    top = [i for i in scene.instances if i.spec.cls == "box" and i.layer == scene.top_layer
           and i.visibility >= 0.25]
    dets = []
    for inst in top[drop:]:
        pos = frame.apply(inst.position)
        dets.append(Detection(
            pixel=(0, 0), cls="box", orientation=inst.orientation, score=1.0, position=pos,
            rotation=frame.rotation @ inst.rotation, dims=inst.dims, keypoints_3d=inst.keypoints_3d,
            visibility=inst.visibility, prior_confidence=0.0, bdt=1.0, certainties=(1.0, 1.0, 1.0),
            position_kp=pos, rotation_kp=frame.rotation @ inst.rotation, dims_kp=inst.dims))
    assert len(top) == len(gts)
    return dets


def test_perfect_detections_score_one():
    sc = scenes()
    gts = [GroundTruthSample(str(i), "A" if i % 2 else "B", s) for i, s in enumerate(sc)]
    res = {str(i): perfect_detections(s) for i, s in enumerate(sc)}
    rep = evaluate_dataset(res, gts)
    for source in ("direct", "keypoints", "front_bottom"):
        assert rep.f(source) == 1.0
        assert [m.product_id for m in rep.sources[source].per_product] == ["A", "B"]


def test_dropped_instance_recall():
    sc = scenes()
    gts = [GroundTruthSample(str(i), "A", s) for i, s in enumerate(sc)]
    res = {str(i): perfect_detections(s, drop=1) for i, s in enumerate(sc)}
    rep = evaluate_dataset(res, gts, pose_sources=("direct",))
    n = sum(len(ground_truth_items(s)[0]) for s in sc)
    agg = rep.sources["direct"].aggregate
    assert agg.recall == pytest.approx((n - len(sc)) / n)
    assert agg.precision == 1.0 and agg.fn == len(sc)


def test_empty_results():
    sc = scenes(2)
    gts = [GroundTruthSample(str(i), "A", s) for i, s in enumerate(sc)]
    rep = evaluate_dataset({"0": [], "1": []}, gts)
    agg = rep.sources["direct"].aggregate
    assert (agg.precision, agg.recall, agg.f_measure) == (1.0, 0.0, 0.0)


def test_lower_layer_detections_ignored():
    sc = scenes(1)[0]
    frame = sc.pallet_frame
    dets = perfect_detections(sc)
    low = [i for i in sc.instances if i.layer < sc.top_layer and i.spec.cls == "box"]
    assert low
    extra = dets[0].__class__(**{**dets[0].__dict__, "position": frame.apply(low[0].position),
                                 "position_kp": frame.apply(low[0].position)})
    rep = evaluate_dataset({"0": dets + [extra]}, [GroundTruthSample("0", "A", sc)])
    assert rep.f("direct") == 1.0


def test_mismatch_rejected():
    sc = scenes(2)
    gts = [GroundTruthSample("0", "A", sc[0]), GroundTruthSample("1", "A", sc[1])]
    with pytest.raises(ValueError):
        evaluate_dataset({"0": []}, gts)
    with pytest.raises(ValueError):
        evaluate_dataset({"0": [], "1": [], "2": []}, gts)
    with pytest.raises(ValueError):
        evaluate_dataset({"0": []}, [gts[0], gts[0]])
    with pytest.raises(ValueError):
        evaluate_dataset({"0": [], "1": []}, gts, pose_sources=("centroid",))


def test_report_serialisation():
    sc = scenes(2)
    gts = [GroundTruthSample(str(i), "P1", s) for i, s in enumerate(sc)]
    rep = evaluate_dataset({str(i): perfect_detections(s, drop=i) for i, s in enumerate(sc)}, gts)
    d = json.loads(rep.to_json())
    assert d["criteria"]["d_max"] == [0.025] * 3
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert {r["pose_source"] for r in rows} == {"direct", "keypoints", "front_bottom"}
    assert {r["product_id"] for r in rows} == {"P1", "ALL"}
    for r in rows:
        assert 0 <= float(r["f_measure"]) <= 1
