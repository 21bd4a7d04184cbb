"""Synthetic indoor scenes and simulated region-caption sources.

Scenes are axis-aligned rooms (z up) holding boxes, cylinders and spheres.
Points are sampled on visible surfaces; each camera view carries an exact
depth map rendered by ray casting the same primitives.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfig, PlacementFailure
from .geom import CameraView, PointScene, Region2D, SourceTag, project_points
from .lang import DEFAULT_TEMPLATES, CategorySpec

BACKGROUND = ("wall", "floor", "ceiling")
BACKGROUND_COLORS = {
    "wall": (0.78, 0.76, 0.70),
    "floor": (0.45, 0.33, 0.22),
    "ceiling": (0.93, 0.93, 0.93),
}
ATTRIBUTES = ("red", "blue", "wooden", "white", "black", "old", "modern", "green", "grey", "shiny")
CAPTION_TEMPLATE = "a photo of a {}"

_SHAPES = ("box", "cylinder", "sphere")
_SIZE_RANGES = {
    # (half-width range, height range), meters
    "large": ((0.30, 0.55), (0.50, 1.00)),
    "small": ((0.08, 0.16), (0.15, 0.35)),
}


@dataclass
class SceneCategory:
    name: str
    size: str = "large"
    salient: bool = True
    shape: str = "box"
    color: tuple[float, float, float] | None = None
    synonyms: list[str] = field(default_factory=list)
    templates: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))

    def __post_init__(self):
        if self.size not in _SIZE_RANGES:
            raise InvalidConfig(f"category {self.name!r}: size must be small or large")
        if self.shape not in _SHAPES:
            raise InvalidConfig(f"category {self.name!r}: unknown shape {self.shape!r}")
        if self.color is None:
            self.color = _name_color(self.name)
        self.color = tuple(float(c) for c in self.color)

    @property
    def spec(self):
        return CategorySpec(self.name, list(self.synonyms), list(self.templates))


def _name_color(name):
    h = hashlib.blake2b(name.encode("utf-8"), digest_size=3).digest()
    return tuple(0.15 + 0.7 * b / 255.0 for b in h)


@dataclass
class SceneConfig:
    room_extent: tuple[float, float, float] = (6.0, 5.0, 3.0)
    object_count_range: tuple[int, int] = (4, 7)
    categories: list[SceneCategory] = field(default_factory=list)
    points_per_m2: float = 20.0
    object_density_scale: float = 6.0
    view_count: int = 4
    seed: int = 0
    image_size: tuple[int, int] = (160, 120)
    fov_deg: float = 70.0
    color_noise: float = 0.04
    background: tuple[str, ...] = BACKGROUND

    def __post_init__(self):
        self.categories = [
            c if isinstance(c, SceneCategory) else SceneCategory(**c) for c in self.categories
        ]
        self.room_extent = tuple(float(x) for x in self.room_extent)
        self.object_count_range = tuple(int(x) for x in self.object_count_range)
        self.image_size = tuple(int(x) for x in self.image_size)
        self.background = tuple(self.background)
        if len(self.room_extent) != 3 or min(self.room_extent) <= 0:
            raise InvalidConfig("scene.room_extent must be three positive lengths")
        lo, hi = self.object_count_range
        if not 0 <= lo <= hi:
            raise InvalidConfig("scene.object_count_range must satisfy 0 <= min <= max")
        if self.points_per_m2 <= 0:
            raise InvalidConfig("scene.points_per_m2 must be positive")
        if self.view_count < 1:
            raise InvalidConfig("scene.view_count must be >= 1")
        if hi > 0 and not self.categories:
            raise InvalidConfig("scene.categories is empty")

    @property
    def names(self):
        return list(self.background) + [c.name for c in self.categories]

    def category_specs(self):
        bg = [CategorySpec(n) for n in self.background]
        return bg + [c.spec for c in self.categories]

    def is_salient(self, label):
        nb = len(self.background)
        return label >= nb and self.categories[label - nb].salient

    def to_json(self):
        d = asdict(self)
        d["background"] = list(self.background)
        return d


@dataclass
class _Object:
    shape: str
    center: np.ndarray  # base center for box/cylinder, center for sphere
    half: np.ndarray  # box half extents (x, y, z)
    radius: float
    height: float
    label: int
    instance: int
    color: np.ndarray

    @property
    def footprint(self):
        if self.shape == "box":
            return float(np.hypot(self.half[0], self.half[1]))
        return self.radius


def _place_objects(cfg, rng, max_retries=200, layouts=20):
    # a crowded room can paint itself into a corner; start the layout over
    # a few times before giving up
    lo, hi = cfg.object_count_range
    n = int(rng.integers(lo, hi + 1))
    for _ in range(layouts):
        try:
            return _try_layout(cfg, rng, n, max_retries)
        except _Crowded as exc:
            last = exc
    raise PlacementFailure(f"{last} ({layouts} layouts tried)")


class _Crowded(Exception):
    pass


def _try_layout(cfg, rng, n, max_retries):
    lx, ly, _ = cfg.room_extent
    nb = len(cfg.background)
    objects = []
    for inst in range(n):
        ci = int(rng.integers(len(cfg.categories)))
        cat = cfg.categories[ci]
        (r_lo, r_hi), (h_lo, h_hi) = _SIZE_RANGES[cat.size]
        jitter = rng.uniform(-0.05, 0.05, 3)
        color = np.clip(np.asarray(cat.color) + jitter, 0.0, 1.0)
        if cat.shape == "box":
            half = np.array([rng.uniform(r_lo, r_hi), rng.uniform(r_lo, r_hi), 0.0])
            height = rng.uniform(h_lo, h_hi)
            half[2] = height / 2
            radius = 0.0
        elif cat.shape == "cylinder":
            radius = rng.uniform(r_lo, r_hi)
            height = rng.uniform(h_lo, h_hi)
            half = np.array([radius, radius, height / 2])
        else:
            radius = rng.uniform(r_lo, min(r_hi, h_hi / 2))
            height = 2 * radius
            half = np.array([radius, radius, radius])
        obj = _Object(cat.shape, np.zeros(3), half, radius, height, nb + ci, inst, color)
        fp = obj.footprint
        margin = 0.15
        for _ in range(max_retries):
            if lx - 2 * (fp + margin) <= 0 or ly - 2 * (fp + margin) <= 0:
                break
            x = rng.uniform(fp + margin, lx - fp - margin)
            y = rng.uniform(fp + margin, ly - fp - margin)
            ok = all(
                np.hypot(x - o.center[0], y - o.center[1]) > fp + o.footprint + 0.1
                for o in objects
            )
            if ok:
                z = radius if cat.shape == "sphere" else 0.0
                obj.center = np.array([x, y, z])
                objects.append(obj)
                break
        else:
            raise _Crowded(f"could not place object {inst} ({cat.name}) after {max_retries} tries")
        if not objects or objects[-1] is not obj:
            raise PlacementFailure(f"object {inst} ({cat.name}) does not fit in the room")
    return objects


# ---------------------------------------------------------------------------
# surface sampling


def _sample_rect(rng, n, origin, e1, e2):
    st = rng.random((n, 2))
    return origin + st[:, :1] * e1 + st[:, 1:] * e2


def _count(rng, area, density):
    return int(rng.poisson(area * density))


def _sample_object(obj, rng, density):
    pts = []
    if obj.shape == "box":
        c, h = obj.center, obj.half
        x0, x1 = c[0] - h[0], c[0] + h[0]
        y0, y1 = c[1] - h[1], c[1] + h[1]
        z1 = obj.height
        faces = [
            (np.array([x0, y0, z1]), np.array([2 * h[0], 0, 0]), np.array([0, 2 * h[1], 0])),
            (np.array([x0, y0, 0]), np.array([2 * h[0], 0, 0]), np.array([0, 0, z1])),
            (np.array([x0, y1, 0]), np.array([2 * h[0], 0, 0]), np.array([0, 0, z1])),
            (np.array([x0, y0, 0]), np.array([0, 2 * h[1], 0]), np.array([0, 0, z1])),
            (np.array([x1, y0, 0]), np.array([0, 2 * h[1], 0]), np.array([0, 0, z1])),
        ]
        for o, e1, e2 in faces:
            area = np.linalg.norm(e1) * np.linalg.norm(e2)
            pts.append(_sample_rect(rng, _count(rng, area, density), o, e1, e2))
    elif obj.shape == "cylinder":
        r, hgt = obj.radius, obj.height
        n_side = _count(rng, 2 * np.pi * r * hgt, density)
        th = rng.uniform(0, 2 * np.pi, n_side)
        z = rng.uniform(0, hgt, n_side)
        pts.append(np.stack([r * np.cos(th), r * np.sin(th), z], 1) + obj.center * [1, 1, 0])
        n_top = _count(rng, np.pi * r * r, density)
        rr = r * np.sqrt(rng.random(n_top))
        th = rng.uniform(0, 2 * np.pi, n_top)
        pts.append(
            np.stack([rr * np.cos(th), rr * np.sin(th), np.full(n_top, hgt)], 1)
            + obj.center * [1, 1, 0]
        )
    else:
        n = _count(rng, 4 * np.pi * obj.radius**2, density)
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts.append(obj.center + obj.radius * d)
    out = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(out) == 0:
        # guarantee every object contributes points
        out = obj.center[None, :] + np.array([[0.0, 0.0, obj.height if obj.shape != "sphere" else obj.radius]])
    return out


def _inside_footprint(points, objects):
    mask = np.zeros(len(points), dtype=bool)
    for o in objects:
        dx = points[:, 0] - o.center[0]
        dy = points[:, 1] - o.center[1]
        if o.shape == "box":
            mask |= (np.abs(dx) < o.half[0]) & (np.abs(dy) < o.half[1])
        elif o.shape == "cylinder":
            mask |= dx * dx + dy * dy < o.radius**2
    return mask


def _sample_room(cfg, rng, objects):
    lx, ly, lz = cfg.room_extent
    d = cfg.points_per_m2
    wall, floor, ceiling = (cfg.background.index(n) for n in BACKGROUND)
    parts = []
    floor_pts = _sample_rect(rng, _count(rng, lx * ly, d), np.zeros(3), np.array([lx, 0, 0]), np.array([0, ly, 0]))
    floor_pts = floor_pts[~_inside_footprint(floor_pts, objects)]
    parts.append((floor_pts, floor))
    parts.append((
        _sample_rect(rng, _count(rng, lx * ly, d), np.array([0, 0, lz]), np.array([lx, 0, 0]), np.array([0, ly, 0])),
        ceiling,
    ))
    walls = [
        (np.zeros(3), np.array([lx, 0, 0])),
        (np.array([0, ly, 0]), np.array([lx, 0, 0])),
        (np.zeros(3), np.array([0, ly, 0])),
        (np.array([lx, 0, 0]), np.array([0, ly, 0])),
    ]
    for o, e1 in walls:
        area = np.linalg.norm(e1) * lz
        parts.append((_sample_rect(rng, _count(rng, area, d), o, e1, np.array([0, 0, lz])), wall))
    return parts


# ---------------------------------------------------------------------------
# cameras and ray casting


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera 4x4 transform for an OpenCV camera at ``position``."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ position
    return ext


def _intrinsics(cfg):
    w, h = cfg.image_size
    f = 0.5 * w / np.tan(np.radians(cfg.fov_deg) / 2)
    return np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])


def _camera_poses(cfg, rng):
    lx, ly, lz = cfg.room_extent
    center = np.array([lx / 2, ly / 2])
    radius = 0.40 * min(lx, ly)
    height = min(0.75 * lz, lz - 0.2)
    theta0 = rng.uniform(0, 2 * np.pi)
    poses = []
    for k in range(cfg.view_count):
        th = theta0 + 2 * np.pi * k / cfg.view_count
        pos = np.array([*(center + radius * np.array([np.cos(th), np.sin(th)])), height])
        # look across the room, slightly past center, toward the floor
        target = np.array([*(center - 0.5 * radius * np.array([np.cos(th), np.sin(th)])), 0.3])
        poses.append(look_at(pos, target))
    return poses


def _ray_room(o, d, extent):
    t = np.full(len(d), np.inf)
    for ax in range(3):
        da = d[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = np.where(da > 0, extent[ax], 0.0)
            ta = (bound - o[ax]) / da
        ta = np.where(da != 0, ta, np.inf)
        t = np.minimum(t, ta)
    return t


def _ray_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    return np.where(hit, tmin, np.inf)


def _ray_sphere(o, d, c, r):
    oc = o - c
    a = np.einsum("ij,ij->i", d, d)
    b = 2 * d @ oc
    cc = oc @ oc - r * r
    disc = b * b - 4 * a * cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0))
    t = (-b - sq) / (2 * a)
    return np.where(ok & (t > 1e-9), t, np.inf)


def _ray_cylinder(o, d, base, r, h):
    ox, oy = o[0] - base[0], o[1] - base[1]
    dx, dy = d[:, 0], d[:, 1]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - r * r
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 0)
    sq = np.sqrt(np.where(ok, disc, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - sq) / (2 * a)
    z = o[2] + t_side * d[:, 2]
    t_side = np.where(ok & (t_side > 1e-9) & (z >= 0) & (z <= h), t_side, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_top = (h - o[2]) / d[:, 2]
    px = ox + t_top * dx
    py = oy + t_top * dy
    t_top = np.where((t_top > 1e-9) & (px * px + py * py <= r * r), t_top, np.inf)
    return np.minimum(t_side, t_top)


def _render_depth(cfg, k, ext, objects):
    w, h = cfg.image_size
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pix = np.stack([uu.ravel(), vv.ravel(), np.ones(w * h)], axis=1)
    d_cam = np.linalg.solve(k, pix.T).T  # z component == 1
    rot = ext[:3, :3]
    origin = -rot.T @ ext[:3, 3]
    d_world = d_cam @ rot
    t = _ray_room(origin, d_world, np.asarray(cfg.room_extent))
    for ob in objects:
        if ob.shape == "box":
            lo = ob.center - ob.half * [1, 1, 0]
            hi = ob.center + ob.half * [1, 1, 0] + [0, 0, ob.height]
            t = np.minimum(t, _ray_box(origin, d_world, lo, hi))
        elif ob.shape == "cylinder":
            t = np.minimum(t, _ray_cylinder(origin, d_world, ob.center, ob.radius, ob.height))
        else:
            t = np.minimum(t, _ray_sphere(origin, d_world, ob.center, ob.radius))
    t = np.where(np.isfinite(t), t, 0.0)
    # ray parameter equals camera depth because d_cam has unit z
    return t.reshape(h, w).astype(np.float32)


def generate_scene(cfg, scene_id=None):
    """Build a seeded synthetic room scene with rendered depth views."""
    rng = np.random.default_rng(cfg.seed)
    objects = _place_objects(cfg, rng)
    pts, labels, inst, colors = [], [], [], []
    for p, lab in _sample_room(cfg, rng, objects):
        pts.append(p)
        labels.append(np.full(len(p), lab))
        inst.append(np.full(len(p), -1))
        colors.append(np.broadcast_to(BACKGROUND_COLORS.get(cfg.background[lab], (0.5, 0.5, 0.5)), p.shape))
    obj_density = cfg.points_per_m2 * cfg.object_density_scale
    for ob in objects:
        p = _sample_object(ob, rng, obj_density)
        pts.append(p)
        labels.append(np.full(len(p), ob.label))
        inst.append(np.full(len(p), ob.instance))
        colors.append(np.broadcast_to(ob.color, p.shape))
    points = np.concatenate(pts)
    colors = np.concatenate(colors) + rng.normal(0, cfg.color_noise, (len(points), 3))
    colors = np.clip(colors, 0.0, 1.0)
    # store at file precision so in-memory and reloaded scenes agree
    points = points.astype(np.float32).astype(np.float64)
    colors = colors.astype(np.float32).astype(np.float64)

    k = _intrinsics(cfg)
    w, h = cfg.image_size
    views = [
        CameraView(k, ext, w, h, _render_depth(cfg, k, ext, objects))
        for ext in _camera_poses(cfg, rng)
    ]
    return PointScene(
        points=points,
        colors=colors,
        labels=np.concatenate(labels),
        views=views,
        scene_id=scene_id or f"scene_{cfg.seed:04d}",
        instances=np.concatenate(inst),
        num_categories=len(cfg.names),
    )


def scene_primitives(cfg):
    """Re-derive the placed primitives of ``cfg`` (for geometry checks)."""
    return _place_objects(cfg, np.random.default_rng(cfg.seed))


# ---------------------------------------------------------------------------
# caption sources


@dataclass
class SourceProfile:
    kind: SourceTag
    vocabulary: list[str]
    salient_only: bool = False
    min_pixel_area: float = 0.0
    caption_style: str = "template"
    label_noise: float = 0.0
    box_jitter: float = 0.0
    grid: tuple[int, int] = (3, 3)
    window_overlap: float = 0.5

    def __post_init__(self):
        self.kind = SourceTag(self.kind)
        self.grid = tuple(int(g) for g in self.grid)
        if not self.vocabulary:
            raise InvalidConfig(f"source {self.kind.value}: vocabulary is empty")
        if self.caption_style not in ("template", "phrase"):
            raise InvalidConfig(f"source {self.kind.value}: caption_style must be template or phrase")
        for name in ("label_noise", "box_jitter", "window_overlap"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise InvalidConfig(f"source {self.kind.value}: {name} must be in [0, 1]")
        if self.window_overlap >= 1.0 or min(self.grid) < 1:
            raise InvalidConfig(f"source {self.kind.value}: invalid sliding-window grid")

    def to_json(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        d["grid"] = list(self.grid)
        return d


def _caption(name, style, rng):
    if style == "template":
        return CAPTION_TEMPLATE.format(name)
    return f"a {ATTRIBUTES[int(rng.integers(len(ATTRIBUTES)))]} {name}"


def _maybe_flip(name, profile, names, rng):
    if profile.label_noise > 0 and rng.random() < profile.label_noise:
        pool = [n for n in profile.vocabulary if n != name] or [n for n in names if n != name]
        if pool:
            return pool[int(rng.integers(len(pool)))]
    return name


def _jitter(box, frac, width, height, rng):
    x0, y0, x1, y1 = box
    if frac > 0:
        bw, bh = x1 - x0, y1 - y0
        dx = rng.uniform(-frac, frac, 2) * bw
        dy = rng.uniform(-frac, frac, 2) * bh
        x0, x1 = x0 + dx[0], x1 + dx[1]
        y0, y1 = y0 + dy[0], y1 + dy[1]
    x0, x1 = np.clip([x0, x1], 0, width)
    y0, y1 = np.clip([y0, y1], 0, height)
    if x1 - x0 < 1:
        x0, x1 = (x0, min(x0 + 1, width)) if x0 + 1 <= width else (width - 1, width)
    if y1 - y0 < 1:
        y0, y1 = (y0, min(y0 + 1, height)) if y0 + 1 <= height else (height - 1, height)
    return (float(x0), float(y0), float(x1), float(y1))


def _windows(width, height, grid, overlap):
    gx, gy = grid
    ww = width / (1 + (gx - 1) * (1 - overlap))
    wh = height / (1 + (gy - 1) * (1 - overlap))
    for j in range(gy):
        for i in range(gx):
            x0 = i * ww * (1 - overlap)
            y0 = j * wh * (1 - overlap)
            yield (x0, y0, min(x0 + ww, width), min(y0 + wh, height))


def simulate_source_with_truth(scene, profile, seed, scene_cfg, z_tolerance=0.05):
    """Like :func:`simulate_source` but each region comes with its true category name."""
    rng = np.random.default_rng(seed)
    names = scene_cfg.names
    vocab = set(profile.vocabulary)
    out = {}
    for view_id, view in enumerate(scene.views):
        proj = project_points(scene, view_id, z_tolerance)
        vis = proj.visible
        regions = []
        if profile.kind == SourceTag.sw:
            for box in _windows(view.width, view.height, profile.grid, profile.window_overlap):
                x0, y0, x1, y1 = box
                m = vis & (proj.u >= x0) & (proj.u < x1) & (proj.v >= y0) & (proj.v < y1)
                labs = scene.labels[m]
                labs = labs[labs >= 0]
                if labs.size == 0:
                    continue
                dominant = int(np.argmax(np.bincount(labs)))
                name = names[dominant]
                if name not in vocab:
                    continue
                said = _maybe_flip(name, profile, names, rng)
                box = _jitter(box, profile.box_jitter, view.width, view.height, rng)
                regions.append((Region2D(box, _caption(said, profile.caption_style, rng), profile.kind), name))
        else:
            inst_ids = np.unique(scene.instances[vis & (scene.instances >= 0)])
            for inst in inst_ids:
                m = vis & (scene.instances == inst)
                label = int(scene.labels[m][0])
                name = names[label]
                if name not in vocab:
                    continue
                u, v = proj.u[m], proj.v[m]
                box = (
                    float(np.floor(u.min())),
                    float(np.floor(v.min())),
                    float(min(np.floor(u.max()) + 1, view.width)),
                    float(min(np.floor(v.max()) + 1, view.height)),
                )
                area = (box[2] - box[0]) * (box[3] - box[1])
                if area < profile.min_pixel_area:
                    continue
                if profile.salient_only and not scene_cfg.is_salient(label):
                    continue
                said = _maybe_flip(name, profile, names, rng)
                box = _jitter(box, profile.box_jitter, view.width, view.height, rng)
                regions.append((Region2D(box, _caption(said, profile.caption_style, rng), profile.kind), name))
        out[view_id] = regions
    return out


def simulate_source(scene, profile, seed, scene_cfg, z_tolerance=0.05):
    """Simulate one caption stream over every view of ``scene``.

    Detector-style sources (``det_t``, ``det_c``) box every in-vocabulary
    object; dense captioners (``grit_like``, ``kos_like``) box salient objects
    only; ``sw`` captions a fixed window grid by its dominant visible category.
    Returns ``{view_id: [Region2D, ...]}``.
    """
    full = simulate_source_with_truth(scene, profile, seed, scene_cfg, z_tolerance)
    return {v: [r for r, _ in regs] for v, regs in full.items()}


def load_scene_config(path):
    with open(path, encoding="utf-8") as fh:
        return SceneConfig(**json.load(fh))


def load_source_profiles(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return [SourceProfile(**p) for p in raw]
