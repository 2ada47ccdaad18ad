"""Procedural pallet stacks, an orthographic rasteriser and sensor artefacts.

Scenes are sampled layer by layer on a euro pallet, rendered with a z-buffer
over analytic ray/box intersections and turned into the dense training
targets.  Every random decision draws from the ``numpy.random.Generator``
passed in, so a seed fixes the whole sample bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import ndimage

from .bdt import BdtParams, bounded_distance_transform, disk
from .dense import HEADS, DenseTargets
from .geometry import (FLIP_Z, OrthoCamera, RigidTransform, corner_layout, corners,
                       keypoint_frame, look_at_pallet, rot_z, view_dims)

PALLET_SIZE = (1.2, 0.8, 0.144)  # x, y, height in metres
INTERLAYER_THICKNESS = 0.005
INTERLAYER_MARGIN = 0.02
PRIOR_TOLERANCE = 0.10
BOX_CLASSES = ("box", "interlayer")
CONTENT_KINDS = ("crate", "carton", "closed-box")


@dataclass(frozen=True)
class BoxSpec:
    dims_slh: tuple
    cls: str = "box"
    content_kind: str = "closed-box"

    def __post_init__(self):
        s, l, h = self.dims_slh
        if min(s, l, h) <= 0:
            raise ValueError("box dimensions must be positive")
        if s > l:
            raise ValueError("short side must not exceed long side")
        if self.cls not in BOX_CLASSES:
            raise ValueError(f"unknown class {self.cls!r}")
        if self.cls == "interlayer" and h > 0.01:
            raise ValueError("interlayers are at most 10 mm thick")


@dataclass
class BoxInstance:
    id: int
    spec: BoxSpec
    position: np.ndarray          # box centre, pallet frame
    rotation: np.ndarray          # box axes (short, long, height), pallet frame
    layer: int = 0
    albedo: float = 0.6
    keypoints_3d: np.ndarray = field(default_factory=lambda: np.zeros((8, 3)))
    keypoints_2d: np.ndarray = field(default_factory=lambda: np.zeros((8, 2)))
    visibility: float = 0.0
    prior_match: bool = False
    orientation: str = "short"
    orientation_tie: bool = False

    @property
    def dims(self) -> np.ndarray:
        return np.asarray(self.spec.dims_slh, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "id": self.id, "class": self.spec.cls, "content_kind": self.spec.content_kind,
            "dims_slh": [float(v) for v in self.spec.dims_slh], "position": self.position.tolist(),
            "rotation": self.rotation.tolist(), "layer": self.layer, "albedo": self.albedo,
            "keypoints_3d": self.keypoints_3d.tolist(), "keypoints_2d": self.keypoints_2d.tolist(),
            "visibility": float(self.visibility), "prior_match": bool(self.prior_match),
            "orientation": self.orientation, "orientation_tie": bool(self.orientation_tie),
        }

    @classmethod
    def from_dict(cls, d) -> "BoxInstance":
        spec = BoxSpec(tuple(d["dims_slh"]), d["class"], d["content_kind"])
        return cls(int(d["id"]), spec, np.asarray(d["position"], float),
                   np.asarray(d["rotation"], float), int(d["layer"]), float(d["albedo"]),
                   np.asarray(d["keypoints_3d"], float), np.asarray(d["keypoints_2d"], float),
                   float(d["visibility"]), bool(d["prior_match"]), d["orientation"],
                   bool(d["orientation_tie"]))


@dataclass
class Scene:
    instances: list
    camera: OrthoCamera
    stack_kind: str
    prior_size: tuple | None = None
    wall_depth: float = 4.0
    light: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    ambient: float = 0.4
    background: float = 0.2

    @property
    def pallet_frame(self) -> RigidTransform:
        return self.camera.pose

    @property
    def top_layer(self) -> int:
        layers = [i.layer for i in self.instances if i.spec.cls == "box"]
        return max(layers) if layers else -1

    def to_dict(self) -> dict:
        return {
            "instances": [i.to_dict() for i in self.instances],
            "camera": self.camera.to_dict(), "pallet_frame": self.pallet_frame.to_dict(),
            "stack_kind": self.stack_kind,
            "prior_size": None if self.prior_size is None else [float(v) for v in self.prior_size],
            "wall_depth": self.wall_depth, "light": self.light.tolist(),
            "ambient": self.ambient, "background": self.background,
        }

    @classmethod
    def from_dict(cls, d) -> "Scene":
        return cls([BoxInstance.from_dict(i) for i in d["instances"]],
                   OrthoCamera.from_dict(d["camera"]), d["stack_kind"],
                   None if d["prior_size"] is None else tuple(d["prior_size"]),
                   float(d["wall_depth"]), np.asarray(d["light"], float),
                   float(d["ambient"]), float(d["background"]))


@dataclass(frozen=True)
class SynthConfig:
    width: int = 256
    height: int = 160
    ppm: float = 128.0
    stack_kind: str = "homogeneous"
    layers: tuple = (1, 3)
    grid: tuple | None = None            # fixed (nx, ny) per layer
    max_grid: tuple = (5, 4)
    box_dims: tuple | None = None         # fixed (short, long, height)
    short_range: tuple = (0.2, 0.38)
    aspect_range: tuple = (1.25, 1.8)
    height_range: tuple = (0.12, 0.3)
    interlayers: bool = False
    use_prior: bool = False
    prior_size: tuple | None = None       # explicit prior overriding the stack's
    top_removal: float = 0.0             # max fraction of top-layer boxes removed
    elevation_deg: tuple = (40.0, 60.0)
    yaw_deg: tuple = (-5.0, 5.0)
    camera_distance: float = 2.5
    wall_offset: float = 1.5
    principal_jitter: float = 0.03       # fraction of the image size
    gap: float = 0.01
    gap_jitter: float = 0.01
    yaw_jitter_deg: float = 5.0

    def __post_init__(self):
        if self.stack_kind not in ("homogeneous", "heterogeneous"):
            raise ValueError(f"unknown stack kind {self.stack_kind!r}")
        if self.layers[0] < 1 or self.layers[1] < self.layers[0]:
            raise ValueError("need at least one layer")
        if self.grid is not None and min(self.grid) < 1:
            raise ValueError("need at least one box per layer")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synth options: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def at_scale(self, factor: float) -> "SynthConfig":
        return replace(self, width=int(round(self.width * factor)),
                       height=int(round(self.height * factor)), ppm=self.ppm * factor)


# -- stack sampling ----------------------------------------------------------

def _footprint_corners(center_xy, yaw, fx, fy):
    c, s = math.cos(yaw), math.sin(yaw)
    hx, hy = fx / 2, fy / 2
    pts = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    return pts @ np.array([[c, s], [-s, c]]) + np.asarray(center_xy)


def _penetration(a, b) -> float:
    """Separating-axis overlap depth of two convex quads (0 if disjoint)."""
    depth = np.inf
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]]) / np.hypot(*edge)
            pa, pb = a @ axis, b @ axis
            overlap = min(pa.max(), pb.max()) - max(pa.min(), pb.min())
            if overlap <= 0:
                return 0.0
            depth = min(depth, overlap)
    return float(depth)


def _place_layer(rng, cfg, slots, tol=1e-3):
    """Jitter nominal slots ``(x, y, yaw0, fx, fy)``, rejecting interpenetration.

    ``fx``/``fy`` are the footprint extents along pallet x/y at ``yaw0``.
    """
    scale = 1.0
    for attempt in range(40):
        placed, quads = [], []
        for x, y, yaw0, fx, fy in slots:
            dx, dy = rng.uniform(-0.5, 0.5, 2) * cfg.gap_jitter * scale
            dyaw = math.radians(rng.uniform(-1, 1) * cfg.yaw_jitter_deg * scale)
            placed.append((x + dx, y + dy, yaw0 + dyaw, fx, fy))
            quads.append(_footprint_corners((x + dx, y + dy), dyaw, fx, fy))
        ok = all(_penetration(quads[i], quads[j]) <= tol
                 for i in range(len(quads)) for j in range(i + 1, len(quads)))
        if ok:
            return placed
        if attempt % 5 == 4:
            scale *= 0.5
    return list(slots)


def _grid_counts(cfg, fx, fy):
    px, py = PALLET_SIZE[:2]
    nx = int((px + cfg.gap) // (fx + cfg.gap + cfg.gap_jitter))
    ny = int((py + cfg.gap) // (fy + cfg.gap + cfg.gap_jitter))
    return min(nx, cfg.max_grid[0]), min(ny, cfg.max_grid[1])


def _homogeneous_layer(rng, cfg, spec):
    s, l, _ = spec.dims_slh
    options = []
    for yaw0, fx, fy in ((0.0, s, l), (math.pi / 2, l, s)):
        if cfg.grid is not None:
            nx, ny = cfg.grid
            px, py = PALLET_SIZE[:2]
            if nx * fx + (nx - 1) * cfg.gap > px + 1e-9 or ny * fy + (ny - 1) * cfg.gap > py + 1e-9:
                continue
        else:
            nx, ny = _grid_counts(cfg, fx, fy)
        if nx >= 1 and ny >= 1:
            options.append((yaw0, fx, fy, nx, ny))
    if not options:
        raise ValueError(f"box {spec.dims_slh} does not fit on the pallet")
    yaw0, fx, fy, nx, ny = options[rng.integers(len(options))]
    pitch_x, pitch_y = fx + cfg.gap, fy + cfg.gap
    slots = []
    for j in range(ny):
        for i in range(nx):
            slots.append(((i - (nx - 1) / 2) * pitch_x, (j - (ny - 1) / 2) * pitch_y, yaw0, fx, fy))
    return [(slot, spec) for slot in slots]


def _sample_side(rng, cfg, avoid=None):
    lo = cfg.short_range[0]
    hi = cfg.short_range[1] * cfg.aspect_range[1]
    for _ in range(100):
        v = rng.uniform(lo, min(hi, 0.75))
        if avoid is None or not (avoid / 1.2 < v < avoid * 1.2):
            return v
    return avoid * 1.3


def _heterogeneous_layer(rng, cfg, height):
    px, py = PALLET_SIZE[:2]
    rows, y_used = [], 0.0
    while True:
        fy = _sample_side(rng, cfg)
        if y_used + fy > py and rows:
            break
        if fy > py:
            raise ValueError("box does not fit on the pallet")
        row, x_used = [], 0.0
        while True:
            fx = _sample_side(rng, cfg, avoid=fy)
            if x_used + fx > px and row:
                break
            if fx > px:
                raise ValueError("box does not fit on the pallet")
            row.append(fx)
            x_used += fx + cfg.gap
        rows.append((fy, row, x_used - cfg.gap))
        y_used += fy + cfg.gap
    y = -(y_used - cfg.gap) / 2
    out = []
    for fy, row, width in rows:
        x = -width / 2
        for fx in row:
            short, long_ = min(fx, fy), max(fx, fy)
            spec = BoxSpec((short, long_, height), "box", CONTENT_KINDS[rng.integers(3)])
            yaw0 = 0.0 if fx <= fy else math.pi / 2
            out.append(((x + fx / 2, y + fy / 2, yaw0, fx, fy), spec))
            x += fx + cfg.gap
        y += fy + cfg.gap
    return out


def _sample_spec(rng, cfg) -> BoxSpec:
    if cfg.box_dims is not None:
        return BoxSpec(tuple(float(v) for v in cfg.box_dims), "box", CONTENT_KINDS[rng.integers(3)])
    s = rng.uniform(*cfg.short_range)
    l = s * rng.uniform(*cfg.aspect_range)
    h = rng.uniform(*cfg.height_range)
    return BoxSpec((s, l, h), "box", CONTENT_KINDS[rng.integers(3)])


def prior_matches(dims_slh, prior, tol: float = PRIOR_TOLERANCE) -> bool:
    if prior is None:
        return False
    d, p = np.asarray(dims_slh, float), np.asarray(prior, float)
    return bool(np.all(np.abs(d - p) <= tol * p))


def sample_stack(cfg: SynthConfig, rng: np.random.Generator) -> Scene:
    n_layers = int(rng.integers(cfg.layers[0], cfg.layers[1] + 1))
    common = _sample_spec(rng, cfg) if cfg.stack_kind == "homogeneous" else None
    if common is not None and (common.dims_slh[0] > PALLET_SIZE[1] or common.dims_slh[1] > PALLET_SIZE[0]):
        raise ValueError(f"box {common.dims_slh} is larger than the pallet")
    homo_albedo = rng.uniform(0.35, 0.85)
    instances, z, next_id = [], 0.0, 1
    for layer in range(n_layers):
        if common is not None:
            entries = _homogeneous_layer(rng, cfg, common)
        else:
            entries = _heterogeneous_layer(rng, cfg, rng.uniform(*cfg.height_range))
        slots = _place_layer(rng, cfg, [e[0] for e in entries])
        height = entries[0][1].dims_slh[2]
        if cfg.interlayers:
            xs = [abs(x) + max(fx, fy) / 2 for x, _, _, fx, fy in slots]
            ys = [abs(y) + max(fx, fy) / 2 for _, y, _, fx, fy in slots]
            ex = 2 * (max(xs) + INTERLAYER_MARGIN)
            ey = 2 * (max(ys) + INTERLAYER_MARGIN)
            spec = BoxSpec((min(ex, ey), max(ex, ey), INTERLAYER_THICKNESS), "interlayer", "closed-box")
            yaw = 0.0 if ex <= ey else math.pi / 2
            instances.append(BoxInstance(next_id, spec, np.array([0.0, 0.0, z + INTERLAYER_THICKNESS / 2]),
                                         rot_z(yaw), layer, float(rng.uniform(0.5, 0.7))))
            next_id += 1
            z += INTERLAYER_THICKNESS
        for (x, y, yaw, _, _), (_, spec) in zip(slots, entries):
            albedo = homo_albedo + rng.uniform(-0.03, 0.03) if common is not None else rng.uniform(0.25, 0.9)
            instances.append(BoxInstance(next_id, spec, np.array([x, y, z + height / 2]),
                                         rot_z(yaw), layer, float(albedo)))
            next_id += 1
        z += height
    if cfg.top_removal > 0:
        top = [i for i in instances if i.layer == n_layers - 1 and i.spec.cls == "box"]
        k = int(rng.integers(0, int(cfg.top_removal * len(top)) + 1))
        k = min(k, len(top) - 1)
        drop = {top[i].id for i in rng.choice(len(top), size=k, replace=False)} if k else set()
        instances = [i for i in instances if i.id not in drop]
        for new_id, inst in enumerate(instances, start=1):
            inst.id = new_id

    prior = None
    if cfg.prior_size is not None:
        prior = tuple(float(v) for v in cfg.prior_size)
    elif cfg.use_prior:
        boxes = [i for i in instances if i.spec.cls == "box"]
        prior = common.dims_slh if common is not None else boxes[rng.integers(len(boxes))].spec.dims_slh
    for inst in instances:
        inst.prior_match = inst.spec.cls == "box" and prior_matches(inst.spec.dims_slh, prior)

    elevation = math.radians(rng.uniform(*cfg.elevation_deg))
    yaw = math.radians(rng.uniform(*cfg.yaw_deg))
    target = np.array([0.0, 0.0, (z - PALLET_SIZE[2]) / 2])
    pose = look_at_pallet(elevation, yaw, target, cfg.camera_distance)
    jx, jy = rng.uniform(-1, 1, 2) * cfg.principal_jitter
    camera = OrthoCamera(cfg.width, cfg.height, cfg.ppm,
                         (cfg.width - 1) / 2 + jx * cfg.width, (cfg.height - 1) / 2 + jy * cfg.height, pose)
    light = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 1.0])
    light /= np.linalg.norm(light)
    return Scene(instances, camera, cfg.stack_kind, prior,
                 cfg.camera_distance + cfg.wall_offset, light,
                 float(rng.uniform(0.3, 0.5)), float(rng.uniform(0.1, 0.3)))


# -- rasterisation -------------------------------------------------------------

@dataclass
class Rasterization:
    intensity: np.ndarray
    depth: np.ndarray
    idmap: np.ndarray
    instances: list
    coverage: dict          # id -> unoccluded projected pixel count


def _cam_pose(scene, position, rotation):
    pose = scene.camera.pose
    return pose.apply(position), pose.rotation @ rotation


def _pixel_window(camera, center_cam, r_cam, half, clip=True):
    pts = (np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * half) @ r_cam.T + center_cam
    uv = camera.project(pts)
    c0, c1 = int(math.floor(uv[:, 0].min())), int(math.ceil(uv[:, 0].max()))
    r0, r1 = int(math.floor(uv[:, 1].min())), int(math.ceil(uv[:, 1].max()))
    if clip:
        c0, c1 = max(c0, 0), min(c1, camera.width - 1)
        r0, r1 = max(r0, 0), min(r1, camera.height - 1)
    return r0, r1, c0, c1


def ray_box(camera, center_cam, r_cam, half, rows, cols):
    """Intersect orthographic pixel rays with an oriented box.

    Returns (hit, depth, face_axis, face_sign, local_hit_point).
    """
    x, y = camera.pixel_xy(rows, cols)
    o = np.stack([x - center_cam[0], y - center_cam[1], np.full_like(x, -center_cam[2])], -1)
    o_l = o @ r_cam
    d_l = r_cam[2, :]
    t_lo = np.empty_like(o_l)
    t_hi = np.empty_like(o_l)
    for a in range(3):
        if abs(d_l[a]) < 1e-12:
            inside = np.abs(o_l[..., a]) <= half[a]
            t_lo[..., a] = np.where(inside, -np.inf, np.inf)
            t_hi[..., a] = np.where(inside, np.inf, -np.inf)
        else:
            t1 = (-half[a] - o_l[..., a]) / d_l[a]
            t2 = (half[a] - o_l[..., a]) / d_l[a]
            t_lo[..., a] = np.minimum(t1, t2)
            t_hi[..., a] = np.maximum(t1, t2)
    t_near = t_lo.max(-1)
    t_far = t_hi.min(-1)
    hit = (t_near <= t_far) & (t_far > 0)
    axis = t_lo.argmax(-1)
    sign = -np.sign(d_l[axis])
    local = o_l + np.where(hit, t_near, 0.0)[..., None] * d_l
    return hit, t_near, axis, sign, local


def _face_texture(kind, axis, local, half):
    tex = np.ones(axis.shape)
    top = axis == 2
    if kind == "crate":
        stripes = np.sin(2 * np.pi * local[..., 1] / 0.06) > 0
        tex = np.where(top & stripes, 0.75, tex)
    elif kind == "carton":
        inner = (np.abs(local[..., 0]) < 0.8 * half[0]) & (np.abs(local[..., 1]) < 0.8 * half[1])
        tex = np.where(top & inner, 0.6, tex)
    else:
        tape = np.abs(local[..., 0]) < 0.025
        tex = np.where(top & tape, 0.8, tex)
    return tex


def _coverage(camera, center_cam, r_cam, half) -> int:
    r0, r1, c0, c1 = _pixel_window(camera, center_cam, r_cam, half, clip=False)
    rows, cols = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    hit = ray_box(camera, center_cam, r_cam, half, rows.astype(float), cols.astype(float))[0]
    return int(hit.sum())


def annotate_instance(scene: Scene, inst: BoxInstance) -> BoxInstance:
    """Fill in keypoints and orientation of an instance for the scene camera."""
    center_cam, r_cam = _cam_pose(scene, inst.position, inst.rotation)
    layout = corner_layout(r_cam, inst.dims)
    kp_r = keypoint_frame(r_cam, layout)
    kps = corners(center_cam, kp_r, view_dims(inst.dims, layout))
    return replace(inst, keypoints_3d=kps, keypoints_2d=scene.camera.project(kps),
                   orientation=layout.orientation, orientation_tie=layout.tie)


def rasterize(scene: Scene) -> Rasterization:
    cam = scene.camera
    h, w = cam.height, cam.width
    depth = np.full((h, w), scene.wall_depth, dtype=np.float64)
    intensity = np.full((h, w), scene.background, dtype=np.float64)
    idmap = np.zeros((h, w), dtype=np.int32)
    light_cam = scene.light

    px, py, ph = PALLET_SIZE
    objects = [(0, np.array([0.0, 0.0, -ph / 2]), np.eye(3), np.array([px, py, ph]) / 2, 0.45, "closed-box")]
    for inst in scene.instances:
        objects.append((inst.id, inst.position, inst.rotation, inst.dims / 2, inst.albedo, inst.spec.content_kind))

    coverage = {}
    for oid, pos, rot, half, albedo, kind in objects:
        center_cam, r_cam = _cam_pose(scene, pos, rot)
        if oid:
            coverage[oid] = _coverage(cam, center_cam, r_cam, half)
        r0, r1, c0, c1 = _pixel_window(cam, center_cam, r_cam, half)
        if r0 > r1 or c0 > c1:
            continue
        rows, cols = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        hit, t, axis, sign, local = ray_box(cam, center_cam, r_cam, half, rows.astype(float), cols.astype(float))
        win = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        closer = hit & (t < depth[win])
        if not closer.any():
            continue
        normal = r_cam[:, axis].transpose(1, 2, 0) * sign[..., None]
        shade = scene.ambient + (1 - scene.ambient) * np.clip(-(normal @ light_cam), 0, 1)
        if oid:
            shade = shade * _face_texture(kind, axis, local, half)
        depth[win] = np.where(closer, t, depth[win])
        intensity[win] = np.where(closer, albedo * shade, intensity[win])
        idmap[win] = np.where(closer, oid, idmap[win])

    counts = np.bincount(idmap.ravel(), minlength=len(objects) + 1)
    updated = []
    for inst in scene.instances:
        inst = annotate_instance(scene, inst)
        cov = coverage[inst.id]
        vis = counts[inst.id] / cov if cov else 0.0
        updated.append(replace(inst, visibility=float(min(vis, 1.0))))
    return Rasterization(intensity.astype(np.float32), depth.astype(np.float32), idmap, updated, coverage)


# -- sensor artefacts ----------------------------------------------------------

@dataclass(frozen=True)
class AugmentationConfig:
    depth_noise_range: tuple = (0.0, 0.005)     # metres
    intensity_noise_range: tuple = (0.0, 0.03)
    blur_kernel_range: tuple = (1, 5)           # odd sizes; 1 disables blur
    bernoulli_p_range: tuple = (0.0, 0.02)
    dilated_p_range: tuple = (0.0, 0.002)
    dilated_radius_range: tuple = (1, 3)
    polygon_count_range: tuple = (0, 2)
    polygon_vertex_range: tuple = (3, 6)
    polygon_size_range: tuple = (0.03, 0.12)    # fraction of the image diagonal
    ellipse_count_range: tuple = (0, 2)
    ellipse_size_range: tuple = (0.02, 0.08)
    sparsify_intensity: bool = True

    def __post_init__(self):
        for name in ("depth_noise_range", "intensity_noise_range", "blur_kernel_range",
                     "bernoulli_p_range", "dilated_p_range", "dilated_radius_range",
                     "polygon_count_range", "polygon_vertex_range", "polygon_size_range",
                     "ellipse_count_range", "ellipse_size_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered")
        for name in ("bernoulli_p_range", "dilated_p_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi > 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "AugmentationConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    @classmethod
    def none(cls) -> "AugmentationConfig":
        return cls((0.0, 0.0), (0.0, 0.0), (1, 1), (0.0, 0.0), (0.0, 0.0), (1, 1),
                   (0, 0), (3, 3), (0.0, 0.0), (0, 0), (0.0, 0.0))


def _polygon_mask(h, w, vertices):
    """Even-odd fill of a polygon given as (x, y) pixel vertices."""
    yy, xx = np.mgrid[0:h, 0:w]
    inside = np.zeros((h, w), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        cond = (y1 > yy) != (y2 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = (x2 - x1) * (yy - y1) / (y2 - y1) + x1
        inside ^= cond & (xx < xcross)
    return inside


def sparsity_mask(shape, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Random holes: 1 marks a removed measurement."""
    h, w = shape
    diag = math.hypot(h, w)
    mask = np.zeros((h, w), dtype=bool)
    p = rng.uniform(*cfg.bernoulli_p_range)
    if p > 0:
        mask |= rng.random((h, w)) < p
    p = rng.uniform(*cfg.dilated_p_range)
    if p > 0:
        seeds = rng.random((h, w)) < p
        r = int(rng.integers(cfg.dilated_radius_range[0], cfg.dilated_radius_range[1] + 1))
        mask |= ndimage.binary_dilation(seeds, structure=disk(r)) if r > 0 else seeds
    for _ in range(int(rng.integers(cfg.polygon_count_range[0], cfg.polygon_count_range[1] + 1))):
        n = int(rng.integers(cfg.polygon_vertex_range[0], cfg.polygon_vertex_range[1] + 1))
        radius = rng.uniform(*cfg.polygon_size_range) * diag
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = radius * rng.uniform(0.5, 1.0, n)
        verts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], 1)
        mask |= _polygon_mask(h, w, verts)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(cfg.ellipse_count_range[0], cfg.ellipse_count_range[1] + 1))):
        a, b = rng.uniform(*cfg.ellipse_size_range, 2) * diag
        cx, cy, th = rng.uniform(0, w), rng.uniform(0, h), rng.uniform(0, np.pi)
        dx, dy = xx - cx, yy - cy
        u = dx * math.cos(th) + dy * math.sin(th)
        v = -dx * math.sin(th) + dy * math.cos(th)
        if a > 0 and b > 0:
            mask |= (u / a) ** 2 + (v / b) ** 2 <= 1
    return mask.astype(np.uint8)


def _gaussian_blur(img, ksize: int, sigma: float):
    if ksize <= 1 or sigma <= 0:
        return img
    return ndimage.gaussian_filter(img, sigma, mode="nearest", truncate=(ksize // 2) / sigma)


def apply_augmentation(intensity, depth, cfg: AugmentationConfig, rng: np.random.Generator):
    """Noise, blur and independent sparsity for intensity and depth.

    Returns ``(intensity, depth, validity)``; validity is 1 where the depth
    measurement survived and the renderer produced a depth.
    """
    intensity = np.asarray(intensity, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    coverage = depth > 0
    sd = rng.uniform(*cfg.depth_noise_range)
    si = rng.uniform(*cfg.intensity_noise_range)
    if sd > 0:
        depth = depth + rng.normal(0.0, sd, depth.shape)
    if si > 0:
        intensity = intensity + rng.normal(0.0, si, intensity.shape)
    k = int(rng.integers(cfg.blur_kernel_range[0] // 2, cfg.blur_kernel_range[1] // 2 + 1)) * 2 + 1
    if k > 1:
        sigma = rng.uniform(0.3, 0.5) * k / 2
        depth = _gaussian_blur(depth, k, sigma)
        intensity = _gaussian_blur(intensity, k, sigma)
    depth_holes = sparsity_mask(depth.shape, cfg, rng).astype(bool)
    if cfg.sparsify_intensity:
        intensity = np.where(sparsity_mask(intensity.shape, cfg, rng).astype(bool), 0.0, intensity)
    validity = coverage & ~depth_holes
    depth = np.where(validity, np.maximum(depth, 0.0), 0.0)
    return (np.clip(intensity, 0.0, 1.0).astype(np.float32), depth.astype(np.float32),
            validity.astype(np.uint8))


# -- dense targets -------------------------------------------------------------

def derive_dense_targets(scene: Scene, rast: Rasterization, bdt_params: BdtParams = BdtParams(),
                         stride: int = 1) -> DenseTargets:
    """Per-pixel ground truth, sampled at every ``stride``-th pixel.

    Grid cell (i, j) takes the target of full-resolution pixel
    (stride*i, stride*j).
    """
    cam = scene.camera
    h, w = rast.idmap.shape
    if (h, w) != (cam.height, cam.width):
        raise ValueError("rasterization does not match the scene camera")
    ids_known = {i.id for i in rast.instances}
    if ids_known != {i.id for i in scene.instances} or not set(np.unique(rast.idmap)) <= ids_known | {0}:
        raise ValueError("rasterization does not belong to this scene")
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    ids = rast.idmap[np.ix_(rows, cols)]
    gh, gw = ids.shape
    bdt = bounded_distance_transform(rast.idmap, bdt_params)[np.ix_(rows, cols)]

    n_inst = max([i.id for i in rast.instances], default=0) + 1
    table = {name: np.zeros((n_inst, k), dtype=np.float64) for name, k in HEADS.items()}
    table["class"][0, 0] = 1.0
    rot_alt = np.zeros((n_inst, 9))
    kp_uv = np.zeros((n_inst, 16))
    for inst in rast.instances:
        i = inst.id
        center_cam, r_cam = _cam_pose(scene, inst.position, inst.rotation)
        layout = corner_layout(r_cam, inst.dims)
        table["class"][i, 1 if inst.spec.cls == "box" else 2] = 1.0
        table["orientation"][i, 1 if inst.orientation == "long" else 0] = 1.0
        table["prior_confidence"][i] = float(inst.prior_match)
        table["visibility"][i] = inst.visibility
        kp_uv[i] = inst.keypoints_2d.reshape(-1)
        table["keypoints_3d"][i] = inst.keypoints_3d.reshape(-1)
        table["position"][i] = center_cam
        table["rotation"][i] = r_cam.reshape(-1)
        rot_alt[i] = (r_cam @ FLIP_Z).reshape(-1)
        table["front_distance"][i] = inst.keypoints_3d[:4, 2].mean()
        table["dims_slh"][i] = inst.dims
        table["dims_wdh"][i] = view_dims(inst.dims, layout)

    heads = {name: table[name][ids] for name in HEADS}
    fg = ids > 0
    # corner offsets relative to the sampling pixel, in image-size units
    rel = kp_uv[ids].reshape(gh, gw, 8, 2)
    rel = (rel - np.stack(np.meshgrid(cols, rows), -1)[:, :, None, :]) / np.array([w, h])
    heads["keypoints_2d"] = np.where(fg[..., None], rel.reshape(gh, gw, 16), 0.0)
    heads["bdt"] = bdt[..., None].astype(np.float64)
    for name in ("certainty_class", "certainty_orientation", "certainty_dims"):
        heads[name] = np.ones((gh, gw, 1))
    heads = {k: v[None].astype(np.float32) for k, v in heads.items()}
    return DenseTargets(heads, instance_ids=ids[None].astype(np.int32),
                        rotation_alt=rot_alt[ids][None].astype(np.float32),
                        rows=rows, cols=cols, image_size=(h, w))
