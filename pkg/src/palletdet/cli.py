"""Command line entry point: ``palletdet <subcommand> ...``.

Lengths on the command line are millimetres; everything inside is metres.
A YAML config file may hold the sections ``synth``, ``augmentation``,
``train``, ``thresholds``, ``criteria`` and ``completion``; flags override it
and the merged result is written next to every output as ``config.yaml``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import storage
from .bdt import BdtParams, bounded_distance_transform
from .depth_completion import CompletionParams, complete_depth
from .evaluation import POSE_SOURCES, GroundTruthSample, MatchCriteria, evaluate_dataset
from .losses import LossParams
from .lossplots import loss_curves, rows_to_csv, write_figures
from .postproc import Thresholds
from .synth import AugmentationConfig, SynthConfig, apply_augmentation, derive_dense_targets, \
    rasterize, sample_stack
from .toynet import SampleContext, ToyNet, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingSet, build_inputs, default_net, predict_and_detect, scene_rng, train

log = logging.getLogger("palletdet")

MM = 1e-3


class CliError(Exception):
    pass


def _mm_triplet(text: str) -> tuple:
    try:
        vals = tuple(float(v) * MM for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected S,L,H in millimetres, got {text!r}")
    if len(vals) != 3 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"expected three positive millimetre values, got {text!r}")
    return vals


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file {p} does not exist")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise CliError(f"{p}: top level must be a mapping")
    return data


def _echo_config(out_dir: Path, effective: dict) -> None:
    (out_dir / "config.yaml").write_text(yaml.safe_dump(effective, sort_keys=True))


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {p}: {exc}")
    return p


def _require_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{p} is not a directory")
    return p


# -- synth -------------------------------------------------------------------

def cmd_synth(args, cfg: dict) -> int:
    synth = dict(cfg.get("synth", {}))
    if args.stack:
        synth["stack_kind"] = args.stack
    if args.interlayers:
        synth["interlayers"] = True
    if args.prior:
        synth["use_prior"] = True
    syn = SynthConfig.from_dict(synth)
    if args.scale != 1.0:
        syn = syn.at_scale(args.scale)
    aug = AugmentationConfig.none() if args.no_augment else AugmentationConfig.from_dict(cfg.get("augmentation", {}))
    out = _out_dir(args.out)
    entries = []
    for i in range(args.count):
        rng = scene_rng(args.seed, i)
        scene = sample_stack(syn, rng)
        rast = rasterize(scene)
        scene.instances = rast.instances
        intensity, depth, _ = apply_augmentation(rast.intensity, rast.depth, aug, rng)
        sid = f"sample_{i:05d}"
        product = "x".join(f"{v * 1000:.0f}" for v in scene.prior_size) if scene.prior_size else scene.stack_kind
        storage.write_sample(out, sid, scene, intensity, depth, rast.idmap,
                             {"seed": args.seed, "index": i, "product_id": product})
        entries.append({"id": sid, "dir": sid, "seed": args.seed, "index": i})
    effective = {"synth": syn.to_dict(), "augmentation": aug.to_dict(), "seed": args.seed, "count": args.count}
    storage.dump_json(out / storage.MANIFEST, {"samples": entries, "config": effective})
    _echo_config(out, effective)
    log.info("wrote %d samples to %s", args.count, out)
    return 0


# -- bdt -----------------------------------------------------------------------

def cmd_bdt(args, cfg: dict) -> int:
    ids = storage.read_png16(args.idmap)
    bdt = bounded_distance_transform(ids, BdtParams(args.s))
    out = _out_dir(args.out)
    storage.write_float_map(out / "bdt.bin", bdt)
    storage.write_png8(out / "bdt_preview.png", bdt)
    _echo_config(out, {"idmap": str(args.idmap), "s": args.s})
    return 0


# -- plot-loss -------------------------------------------------------------------

def cmd_plot_loss(args, cfg: dict) -> int:
    out = _out_dir(args.out)
    rows = loss_curves()
    (out / "loss_curves.csv").write_text(rows_to_csv(rows))
    if not args.no_svg:
        write_figures(rows, out)
    return 0


# -- train ---------------------------------------------------------------------

def _load_training_set(root, bdt_s: float, prior_override=None) -> TrainingSet:
    from .dense import DenseTargets

    xs, ts, ctxs, scenes = [], [], [], []
    for s in storage.iter_dataset(_require_dir(root)):
        scene = s.scene
        rast = rasterize(scene)
        if not np.array_equal(rast.idmap, s.idmap):
            raise CliError(f"{s.sample_id}: id-map does not match its ground truth")
        prior = prior_override if prior_override is not None else scene.prior_size
        ctx = SampleContext(scene.camera, prior)
        xs.append(build_inputs(s.intensity, s.depth, s.validity, ctx))
        ts.append(derive_dense_targets(scene, rast, BdtParams(bdt_s), ToyNet.STRIDE))
        ctxs.append(ctx)
        scenes.append(scene)
    if not xs:
        raise CliError(f"{root}: dataset is empty")
    return TrainingSet(np.stack(xs), DenseTargets.concat(ts), ctxs, scenes)


def cmd_train(args, cfg: dict) -> int:
    tcfg = dict(cfg.get("train", {}))
    for key in ("iterations", "batch_size", "seed"):
        v = getattr(args, key)
        if v is not None:
            tcfg[key] = v
    if args.lr is not None:
        tcfg["lr0"] = args.lr
    if "milestones" not in tcfg:
        it = int(tcfg.get("iterations", TrainConfig.iterations))
        tcfg["milestones"] = [int(round(it * f)) for f in (0.45, 0.6, 0.75, 0.9)]
    loss = dict(tcfg.get("loss", {}))
    if args.static:
        loss["dynamic_scaling"] = False
    tcfg["loss"] = LossParams(**loss)
    train_cfg = TrainConfig.from_dict(tcfg)
    data = _load_training_set(args.data, args.bdt_s)
    out = _out_dir(args.out)
    net = default_net(train_cfg.seed)
    log.info("training %d parameters on %d samples", net.n_params(), len(data))
    result = train(net, data, train_cfg)
    save_checkpoint(net, out / "model.ckpt")
    (out / "train_log.csv").write_text(result.to_csv())
    effective = train_cfg.to_dict()
    effective.update({"data": str(args.data), "bdt_s": args.bdt_s})
    _echo_config(out, effective)
    return 0


# -- detect ----------------------------------------------------------------------

def _thresholds(cfg: dict, args) -> Thresholds:
    t = dict(cfg.get("thresholds", {}))
    for key in ("t_class", "t_vis", "t_bdt", "t_cert"):
        v = getattr(args, key, None)
        if v is not None:
            t[key] = v
    return Thresholds(**t)


def _completion_params(cfg: dict, scene, args) -> CompletionParams:
    c = dict(cfg.get("completion", {}))
    if getattr(args, "wall_depth", None) is not None:
        c["wall_depth"] = args.wall_depth * MM
    c.setdefault("wall_depth", scene.wall_depth)
    return CompletionParams(**c)


def run_detection(net, samples, thresholds: Thresholds, pose_source: str = "direct",
                  prior=None, use_prior: bool = True, completion=None) -> dict:
    """Sample id -> detections; ``completion`` maps a sample to its params."""
    out = {}
    for s in samples:
        scene = s.scene
        depth, validity = s.depth, s.validity
        if completion is not None:
            depth = complete_depth(depth, completion(s))
            validity = np.ones_like(validity)
        p = prior if prior is not None else (scene.prior_size if use_prior else None)
        ctx = SampleContext(scene.camera, p)
        x = build_inputs(s.intensity, depth, validity, ctx)
        out[s.sample_id] = predict_and_detect(net, x, ctx, scene.pallet_frame, thresholds, pose_source)
    return out


def cmd_detect(args, cfg: dict) -> int:
    net = load_checkpoint(args.model)
    thresholds = _thresholds(cfg, args)
    samples = list(storage.iter_dataset(_require_dir(args.data)))
    completion = (lambda s: _completion_params(cfg, s.scene, args)) if args.complete_depth else None
    results = run_detection(net, samples, thresholds, args.pose_source, args.prior_size,
                            not args.no_prior, completion)
    frames = {s.sample_id: s.scene.pallet_frame for s in samples}
    payload = {
        "pose_source": args.pose_source,
        "samples": {sid: [d.to_dict(frames[sid], args.pose_source) for d in dets]
                    for sid, dets in results.items()},
    }
    out = _out_dir(args.out)
    storage.dump_json(out / "detections.json", payload)
    effective = {"model": str(args.model), "data": str(args.data), "pose_source": args.pose_source,
                 "thresholds": vars(thresholds).copy(), "complete_depth": bool(args.complete_depth),
                 "prior_size": None if args.prior_size is None else list(args.prior_size)}
    _echo_config(out, effective)
    return 0


# -- eval ------------------------------------------------------------------------

def cmd_eval(args, cfg: dict) -> int:
    crit = dict(cfg.get("criteria", {}))
    d_max = list(crit.get("d_max", (0.025, 0.025, 0.025)))
    for axis, v in enumerate((args.dmax_x, args.dmax_y, args.dmax_z)):
        if v is not None:
            d_max[axis] = v * MM
    require = crit.get("require_orientation", True)
    if args.orientation_check is not None:
        require = args.orientation_check == "on"
    criteria = MatchCriteria(tuple(d_max), require)
    samples = list(storage.iter_dataset(_require_dir(args.data)))
    gts = [GroundTruthSample(s.sample_id, s.product_id, s.scene) for s in samples]
    if args.model is not None:
        net = load_checkpoint(args.model)
        thresholds = _thresholds(cfg, args)
        completion = (lambda s: _completion_params(cfg, s.scene, args)) if args.complete_depth else None
        results = run_detection(net, samples, thresholds, completion=completion)
    else:
        results = _detections_from_json(args.detections, samples)
    sources = POSE_SOURCES if args.model is not None else ("direct",)
    report = evaluate_dataset(results, gts, criteria, sources)
    out = _out_dir(args.out)
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    (out / "eval_report.csv").write_text(report.to_csv())
    _echo_config(out, {"criteria": criteria.to_dict(), "data": str(args.data)})
    for name, rep in report.sources.items():
        a = rep.aggregate
        print(f"{name}: precision {a.precision:.4f} recall {a.recall:.4f} f {a.f_measure:.4f}")
    return 0


class _StoredDetection:
    """Enough of a detection, read back from detections.json, for scoring."""

    def __init__(self, d: dict):
        self.cls = d["class"]
        self.orientation = d["orientation"]
        self.score = float(d["score"])
        self.position = np.asarray(d["position_camera"], dtype=np.float64)
        self.position_kp = self.position

    def source_position(self, source):
        return self.position


def _detections_from_json(path, samples) -> dict:
    if path is None:
        raise CliError("eval needs --model or --detections")
    data = storage.load_json(path)
    known = {s.sample_id for s in samples}
    out = {}
    for sid, dets in data["samples"].items():
        if sid not in known:
            raise CliError(f"detections for unknown sample {sid}")
        out[sid] = [_StoredDetection(d) for d in dets]
    return out


# -- complete-depth ----------------------------------------------------------------

def cmd_complete_depth(args, cfg: dict) -> int:
    depth = storage.read_float_map(args.depth)
    c = dict(cfg.get("completion", {}))
    c["wall_depth"] = args.wall_depth * MM
    for key in ("large_area_px", "morph_radius", "inpaint_iterations"):
        v = getattr(args, key)
        if v is not None:
            c[key] = v
    params = CompletionParams(**c)
    out = Path(args.out)
    _out_dir(out.parent)
    storage.write_float_map(out, complete_depth(depth, params))
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="palletdet", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=_positive(int), default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stack", choices=("homogeneous", "heterogeneous"))
    s.add_argument("--interlayers", action="store_true")
    s.add_argument("--prior", action="store_true", help="record the stack's box size as prior")
    s.add_argument("--scale", type=_positive(float), default=1.0, help="resolution factor")
    s.add_argument("--no-augment", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("bdt", help="bounded distance transform of a 16-bit id-map")
    s.add_argument("--idmap", required=True)
    s.add_argument("--s", type=_positive(float), default=8.0, help="scale in pixels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bdt)

    s = sub.add_parser("plot-loss", help="loss, modulation and certainty curves")
    s.add_argument("--out", required=True)
    s.add_argument("--no-svg", action="store_true")
    s.set_defaults(func=cmd_plot_loss)

    s = sub.add_parser("train", help="train the toy network")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=_positive(int))
    s.add_argument("--batch-size", type=_positive(int))
    s.add_argument("--lr", type=_positive(float))
    s.add_argument("--seed", type=int)
    s.add_argument("--static", action="store_true", help="disable dynamic scaling")
    s.add_argument("--bdt-s", type=_positive(float), default=4.0, help="BDT scale in pixels")
    s.set_defaults(func=cmd_train)

    def add_thresholds(s):
        for key in ("t_class", "t_vis", "t_bdt", "t_cert"):
            s.add_argument("--" + key.replace("_", "-"), dest=key, type=float)

    s = sub.add_parser("detect", help="run a trained network on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pose-source", choices=("direct", "keypoints"), default="direct")
    s.add_argument("--prior-size", type=_mm_triplet, help="S,L,H in millimetres")
    s.add_argument("--no-prior", action="store_true")
    s.add_argument("--complete-depth", action="store_true")
    s.add_argument("--wall-depth", type=_positive(float), help="millimetres")
    add_thresholds(s)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="score detections against ground truth")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--model", help="checkpoint; runs detection for every pose source")
    g.add_argument("--detections", help="detections.json written by detect")
    for axis in "xyz":
        s.add_argument(f"--dmax-{axis}", type=_positive(float), help="millimetres")
    s.add_argument("--orientation-check", choices=("on", "off"))
    s.add_argument("--complete-depth", action="store_true")
    s.add_argument("--wall-depth", type=_positive(float), help="millimetres")
    add_thresholds(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("complete-depth", help="fill invalid pixels of a depth map")
    s.add_argument("--depth", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--wall-depth", type=_positive(float), required=True, help="millimetres")
    s.add_argument("--large-area-px", type=_positive(int))
    s.add_argument("--morph-radius", type=_positive(int))
    s.add_argument("--inpaint-iterations", type=_positive(int))
    s.set_defaults(func=cmd_complete_depth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except (CliError, ValueError, FileNotFoundError, OSError, FloatingPointError) as exc:
        print(f"palletdet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
