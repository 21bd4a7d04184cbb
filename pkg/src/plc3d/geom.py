"""Point-cloud / camera geometry: projection, occlusion and region association.

Camera convention is OpenCV-style: x right, y down, z forward. A point with
camera-frame coordinates (x, y, z) lands on continuous pixel coordinates
``(fx*x/z + cx, fy*y/z + cy)``; pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput, NotFound

IGNORE = -1
_IGNORE_U16 = 0xFFFF

SCENE_MAGIC = b"PLCS"
SCENE_VERSION = 1


class SourceTag(str, enum.Enum):
    det_t = "det_t"
    det_c = "det_c"
    sw = "sw"
    grit_like = "grit_like"
    kos_like = "kos_like"
    synthetic = "synthetic"


@dataclass
class CameraView:
    intrinsics: np.ndarray  # 3x3
    world_to_cam: np.ndarray  # 4x4
    width: int
    height: int
    depth: np.ndarray  # (height, width), meters, 0 = no surface

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        if self.intrinsics.shape != (3, 3) or self.world_to_cam.shape != (4, 4):
            raise InvalidInput("intrinsics must be 3x3 and world_to_cam 4x4")
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise InvalidInput("focal lengths must be positive")
        rot = self.world_to_cam[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6, rtol=0):
            raise InvalidInput("world_to_cam rotation block is not orthonormal")
        if self.depth.shape != (self.height, self.width):
            raise InvalidInput(
                f"depth shape {self.depth.shape} != ({self.height}, {self.width})"
            )
        if (self.depth < 0).any() or not np.isfinite(self.depth).all():
            raise InvalidInput("depth values must be finite and >= 0")

    @property
    def rotation(self):
        return self.world_to_cam[:3, :3]

    @property
    def translation(self):
        return self.world_to_cam[:3, 3]


@dataclass
class PointScene:
    points: np.ndarray  # (n, 3)
    colors: np.ndarray  # (n, 3) in [0, 1]
    labels: np.ndarray  # (n,) category index or IGNORE
    views: list[CameraView]
    scene_id: str
    # per-point object instance id, -1 for background; optional
    instances: np.ndarray | None = None
    num_categories: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.points)
        if n < 1:
            raise InvalidInput("scene must contain at least one point")
        if self.points.shape != (n, 3) or self.colors.shape != (n, 3):
            raise InvalidInput("points and colors must be (n, 3)")
        if self.labels.shape != (n,):
            raise InvalidInput("labels must have one entry per point")
        if not np.isfinite(self.points).all():
            raise InvalidInput("non-finite point coordinates")
        bad = (self.labels < 0) & (self.labels != IGNORE)
        if self.num_categories is not None:
            bad |= self.labels >= self.num_categories
        if bad.any():
            raise InvalidInput("label index out of range")
        if self.instances is None:
            self.instances = np.full(n, -1, dtype=np.int64)
        else:
            self.instances = np.asarray(self.instances, dtype=np.int64)
            if self.instances.shape != (n,):
                raise InvalidInput("instances must have one entry per point")

    def __len__(self):
        return len(self.points)

    def view(self, view_id):
        if not 0 <= view_id < len(self.views):
            raise NotFound(f"scene {self.scene_id!r} has no view {view_id}")
        return self.views[view_id]


@dataclass
class Region2D:
    box: tuple[float, float, float, float]
    caption: str
    source: SourceTag

    def __post_init__(self):
        self.box = tuple(float(c) for c in self.box)
        self.source = SourceTag(self.source)
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise InvalidInput(f"degenerate box {self.box}")
        if not self.caption.strip():
            raise InvalidInput("caption must be non-empty")

    def check_bounds(self, width, height):
        x0, y0, x1, y1 = self.box
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
            raise InvalidInput(f"box {self.box} outside {width}x{height} image")


@dataclass
class RegionLanguagePair:
    scene_id: str
    point_indices: np.ndarray
    caption: str
    source: SourceTag
    view_id: int = 0

    def __post_init__(self):
        idx = np.asarray(self.point_indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise InvalidInput("point_indices must be a non-empty 1-D set")
        if idx.size > 1 and not (np.diff(idx) > 0).all():
            idx = np.unique(idx)
        if idx[0] < 0:
            raise InvalidInput("negative point index")
        self.point_indices = idx
        self.source = SourceTag(self.source)
        self.view_id = int(self.view_id)

    def to_json(self):
        return {
            "scene_id": self.scene_id,
            "point_indices": self.point_indices.tolist(),
            "caption": self.caption,
            "source": self.source.value,
            "view_id": self.view_id,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            scene_id=obj["scene_id"],
            point_indices=obj["point_indices"],
            caption=obj["caption"],
            source=obj["source"],
            view_id=obj.get("view_id", 0),
        )


@dataclass
class Projection:
    """Per-point projection record for one view."""

    u: np.ndarray
    v: np.ndarray
    cam_depth: np.ndarray
    visible: np.ndarray = field(repr=False)


def world_to_camera(points, view):
    return points @ view.rotation.T + view.translation


def project_points(scene, view_id, z_tolerance=0.01):
    """Project every scene point into ``view_id`` and z-buffer test it.

    A point is visible when it is in front of the camera, lands inside the
    image and its camera depth is within ``z_tolerance`` of the depth map at
    its pixel.
    """
    if not z_tolerance > 0:
        raise InvalidInput("z_tolerance must be positive")
    view = scene.view(view_id)
    if not np.isfinite(scene.points).all():
        raise InvalidInput("non-finite point coordinates")
    cam = world_to_camera(scene.points, view)
    z = cam[:, 2]
    k = view.intrinsics
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    pix = cam @ k.T
    u = np.where(front, pix[:, 0] / safe_z, np.nan)
    v = np.where(front, pix[:, 1] / safe_z, np.nan)
    with np.errstate(invalid="ignore"):
        inside = front & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    visible = np.zeros(len(z), dtype=bool)
    if inside.any():
        ui = np.floor(u[inside]).astype(np.int64)
        vi = np.floor(v[inside]).astype(np.int64)
        ref = view.depth[vi, ui].astype(np.float64)
        visible[inside] = np.abs(z[inside] - ref) <= z_tolerance
    return Projection(u=u, v=v, cam_depth=z, visible=visible)


def back_project(u, v, cam_depth, view):
    """Inverse of the pinhole projection: pixel coords + depth -> world points."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(cam_depth, dtype=np.float64)
    pix = np.stack([u * z, v * z, z], axis=-1)
    cam = np.linalg.solve(view.intrinsics, pix.reshape(-1, 3).T).T.reshape(pix.shape)
    return (cam - view.translation) @ view.rotation


def associate_regions(scene, view_id, regions, min_points=5, z_tolerance=0.01):
    """Pair the visible points inside each box with the box caption.

    Returns ``(pairs, dropped)`` where ``dropped`` counts regions holding fewer
    than ``min_points`` visible points. Boxes are half-open.
    """
    if min_points < 1:
        raise InvalidInput("min_points must be >= 1")
    proj = project_points(scene, view_id, z_tolerance)
    vis_idx = np.flatnonzero(proj.visible)
    u = proj.u[vis_idx]
    v = proj.v[vis_idx]
    pairs = []
    dropped = 0
    for region in regions:
        x0, y0, x1, y1 = region.box
        mask = (u >= x0) & (u < x1) & (v >= y0) & (v < y1)
        if mask.sum() < min_points:
            dropped += 1
            continue
        pairs.append(
            RegionLanguagePair(
                scene_id=scene.scene_id,
                point_indices=vis_idx[mask],
                caption=region.caption,
                source=region.source,
                view_id=view_id,
            )
        )
    return pairs, dropped


# ---------------------------------------------------------------------------
# file formats


def save_scene(scene, path):
    """Write the binary ``PLCS`` scene container (little-endian)."""
    n = len(scene)
    labels = scene.labels.copy()
    labels[labels == IGNORE] = _IGNORE_U16
    chunks = [
        struct.pack("<4sIII", SCENE_MAGIC, SCENE_VERSION, n, len(scene.views)),
        scene.points.astype("<f4").tobytes(),
        scene.colors.astype("<f4").tobytes(),
        labels.astype("<u2").tobytes(),
    ]
    for view in scene.views:
        chunks.append(struct.pack("<II", view.width, view.height))
        chunks.append(view.intrinsics.astype("<f8").tobytes())
        chunks.append(view.world_to_cam.astype("<f8").tobytes())
        chunks.append(view.depth.astype("<f4").tobytes())
    # trailer: scene id, category count, instance ids
    sid = scene.scene_id.encode("utf-8")
    chunks.append(struct.pack("<H", len(sid)) + sid)
    chunks.append(struct.pack("<i", -1 if scene.num_categories is None else scene.num_categories))
    chunks.append(scene.instances.astype("<i4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_scene(path):
    data = Path(path).read_bytes()
    magic, version, n, n_views = struct.unpack_from("<4sIII", data, 0)
    if magic != SCENE_MAGIC:
        raise InvalidInput(f"{path}: not a PLCS scene file")
    if version != SCENE_VERSION:
        raise InvalidInput(f"{path}: unsupported scene version {version}")
    off = 16

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    points = take("<f4", n * 3).reshape(n, 3).astype(np.float64)
    colors = take("<f4", n * 3).reshape(n, 3).astype(np.float64)
    labels = take("<u2", n).astype(np.int64)
    labels[labels == _IGNORE_U16] = IGNORE
    views = []
    for _ in range(n_views):
        w, h = struct.unpack_from("<II", data, off)
        off += 8
        k = take("<f8", 9).reshape(3, 3)
        ext = take("<f8", 16).reshape(4, 4)
        depth = take("<f4", w * h).reshape(h, w)
        views.append(CameraView(k.copy(), ext.copy(), w, h, depth.copy()))
    scene_id = Path(path).stem
    instances = None
    num_categories = None
    if off < len(data):
        (slen,) = struct.unpack_from("<H", data, off)
        off += 2
        scene_id = data[off : off + slen].decode("utf-8")
        off += slen
        (nc,) = struct.unpack_from("<i", data, off)
        off += 4
        num_categories = None if nc < 0 else nc
        instances = take("<i4", n).astype(np.int64)
    return PointScene(points, colors, labels, views, scene_id, instances, num_categories)


def save_regions(regions_by_view, path):
    """Write Region2D records as JSON Lines, one region per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for view_id in sorted(regions_by_view):
            for r in regions_by_view[view_id]:
                rec = {
                    "box": list(r.box),
                    "caption": r.caption,
                    "source": r.source.value,
                    "view_id": int(view_id),
                }
                fh.write(json.dumps(rec) + "\n")


def load_regions(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            region = Region2D(tuple(rec["box"]), rec["caption"], rec["source"])
            out.setdefault(int(rec["view_id"]), []).append(region)
    return out


def save_pairs(pairs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json()) + "\n")


def load_pairs(path):
    with open(path, encoding="utf-8") as fh:
        return [RegionLanguagePair.from_json(json.loads(l)) for l in fh if l.strip()]
