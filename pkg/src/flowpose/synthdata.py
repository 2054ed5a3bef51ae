"""Synthetic partial-view point-cloud instances of three shape categories.

Canonical surfaces are sampled uniformly by area with outward normals, posed
into the scene, back-face culled against a view direction, jittered, and
resampled to a fixed point count.  Clouds are normalized to centroid zero and
unit max radius; the ground-truth translation moves into the same frame.

Category geometry, chosen so that pose recovery is well-posed exactly where
it should be:

* ``box`` - cuboid surface with a corner notch: the quarter-face rectangles
  adjacent to the (+x, +y, +z) corner are cut from the three touching faces.
  A plain cuboid is invariant under three 180-degree flips, which would make
  its pose unrecoverable from geometry alone; the notch removes that
  ambiguity while every remaining point still lies on the cuboid surface.
* ``cylinder`` - open can: lateral wall plus bottom cap only.  A closed
  cylinder can be flipped end over end; the missing top cap breaks the flip,
  leaving exactly the continuous spin about +z, which is the symmetry the
  error metrics are expected to forgive.
* ``mug`` - the open can plus a half-torus handle on the +x side.  The
  handle breaks the spin symmetry, but only when the view actually shows it;
  instances flag whether the handle survived culling.

One scene unit is one meter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose,
    matrix_to_quat,
    matrix_to_rot6d,
    quat_to_matrix,
    random_rotation_within,
)
from .seeding import derive_rng

FORMAT_TAG = "flowpose-dataset"
FORMAT_VERSION = "v1"

CATEGORIES = ("box", "cylinder", "mug")

NOTCH_FRACTION = 0.5  # of each face edge adjacent to the notched corner

# train/test shape-parameter ranges are disjoint per parameter
PARAM_RANGES = {
    "box": {  # three extents share one range
        "train": ((0.25, 0.42),),
        "test": ((0.46, 0.60),),
    },
    "cylinder": {  # (radius, height)
        "train": ((0.10, 0.16), (0.28, 0.42)),
        "test": ((0.18, 0.22), (0.46, 0.55)),
    },
    "mug": {  # (body radius, body height)
        "train": ((0.09, 0.13), (0.18, 0.26)),
        "test": ((0.145, 0.17), (0.29, 0.34)),
    },
}

HANDLE_RING_FRACTION = 0.32  # ring radius as a fraction of body height
HANDLE_TUBE_FRACTION = 0.30  # tube radius as a fraction of ring radius
HANDLE_OCCLUDED_BELOW = 0.05  # surviving handle-point fraction below which the spin symmetry returns

MAX_VIEW_RETRIES = 16


class BadShapeParams(ValueError):
    """Shape parameters are malformed or out of physical range."""


class EmptyView(RuntimeError):
    """No view direction left enough surface after repeated retries."""


class DegenerateCloud(ValueError):
    """Cloud collapses to a point; normalization is undefined."""


class FormatVersionMismatch(ValueError):
    """Dataset file carries an unsupported format version."""


# ---------------------------------------------------------------------------
# canonical surfaces
# ---------------------------------------------------------------------------

@dataclass
class CanonicalSurface:
    """Dense area-uniform sample of a canonical shape.

    ``labels`` is 1 on handle points (mug only) and 0 elsewhere.
    """

    points: np.ndarray   # (3, D)
    normals: np.ndarray  # (3, D)
    labels: np.ndarray   # (D,), uint8


def _check_positive(values, what: str) -> None:
    if any(not np.isfinite(v) or v <= 0 for v in values):
        raise BadShapeParams(f"{what} must be positive finite, got {values}")


def _sample_notched_face(rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform (u, v) in [0,1]^2 minus the [1-f,1]^2 corner square.

    Decomposed into two rectangles so no rejection loop is needed.
    """
    f = NOTCH_FRACTION
    area_a = (1.0 - f)            # u in [0, 1-f], v in [0, 1]
    area_b = f * (1.0 - f)        # u in [1-f, 1], v in [0, 1-f]
    pick_b = rng.random(count) < area_b / (area_a + area_b)
    u = rng.random(count)
    v = rng.random(count)
    u = np.where(pick_b, (1.0 - f) + f * u, (1.0 - f) * u)
    v = np.where(pick_b, (1.0 - f) * v, v)
    return np.stack([u, v], axis=1)


def _box_surface(extents: np.ndarray, dense_count: int, rng: np.random.Generator) -> CanonicalSurface:
    ex, ey, ez = extents
    # faces keyed by (axis, sign); the three + faces carry the corner notch
    notched_scale = 1.0 - NOTCH_FRACTION * NOTCH_FRACTION
    face_dims = {0: (ey, ez), 1: (ex, ez), 2: (ex, ey)}
    faces = []
    areas = []
    for axis in range(3):
        d1, d2 = face_dims[axis]
        for sign in (1.0, -1.0):
            faces.append((axis, sign))
            areas.append(d1 * d2 * (notched_scale if sign > 0 else 1.0))
    areas = np.asarray(areas)
    choice = rng.choice(len(faces), size=dense_count, p=areas / areas.sum())
    pts = np.empty((dense_count, 3))
    nrm = np.zeros((dense_count, 3))
    for fi, (axis, sign) in enumerate(faces):
        idx = np.where(choice == fi)[0]
        if idx.size == 0:
            continue
        d1, d2 = face_dims[axis]
        if sign > 0:
            uv = _sample_notched_face(rng, idx.size)
        else:
            uv = rng.random((idx.size, 2))
        o1, o2 = [a for a in range(3) if a != axis]
        pts[idx, axis] = sign * (extents[axis] / 2.0)
        pts[idx, o1] = (uv[:, 0] - 0.5) * d1
        pts[idx, o2] = (uv[:, 1] - 0.5) * d2
        nrm[idx, axis] = sign
    return CanonicalSurface(pts.T, nrm.T, np.zeros(dense_count, dtype=np.uint8))


def _open_cylinder_points(radius: float, height: float, count: int,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lateral wall + bottom cap, area-uniform; returns points, normals, is_cap."""
    lateral_area = 2.0 * math.pi * radius * height
    cap_area = math.pi * radius * radius
    on_cap = rng.random(count) < cap_area / (lateral_area + cap_area)
    theta = rng.uniform(0.0, 2.0 * math.pi, count)
    pts = np.empty((count, 3))
    nrm = np.empty((count, 3))
    lat = ~on_cap
    pts[lat, 0] = radius * np.cos(theta[lat])
    pts[lat, 1] = radius * np.sin(theta[lat])
    pts[lat, 2] = rng.uniform(-height / 2.0, height / 2.0, int(lat.sum()))
    nrm[lat] = np.stack([np.cos(theta[lat]), np.sin(theta[lat]), np.zeros(int(lat.sum()))], axis=1)
    rho = radius * np.sqrt(rng.random(int(on_cap.sum())))
    pts[on_cap, 0] = rho * np.cos(theta[on_cap])
    pts[on_cap, 1] = rho * np.sin(theta[on_cap])
    pts[on_cap, 2] = -height / 2.0
    nrm[on_cap] = np.array([0.0, 0.0, -1.0])
    return pts, nrm, on_cap


def _cylinder_surface(params: np.ndarray, dense_count: int, rng: np.random.Generator) -> CanonicalSurface:
    radius, height = params
    pts, nrm, _ = _open_cylinder_points(radius, height, dense_count, rng)
    return CanonicalSurface(pts.T, nrm.T, np.zeros(dense_count, dtype=np.uint8))


def _half_torus_points(ring_r: float, tube_r: float, count: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Half torus in the x-z plane bulging toward +x, centered at the origin.

    phi parametrizes the ring over [-pi/2, pi/2]; psi the tube circle, with
    the area weight (R + r cos psi) handled by rejection.
    """
    phi = rng.uniform(-math.pi / 2.0, math.pi / 2.0, count)
    psi = np.empty(count)
    remaining = np.arange(count)
    while remaining.size:
        cand = rng.uniform(0.0, 2.0 * math.pi, remaining.size)
        accept = rng.random(remaining.size) <= (ring_r + tube_r * np.cos(cand)) / (ring_r + tube_r)
        psi[remaining[accept]] = cand[accept]
        remaining = remaining[~accept]
    radial = np.stack([np.cos(phi), np.zeros(count), np.sin(phi)], axis=1)
    ring_pts = ring_r * radial
    normals = np.cos(psi)[:, None] * radial + np.sin(psi)[:, None] * np.array([0.0, 1.0, 0.0])
    return ring_pts + tube_r * normals, normals


def _mug_surface(params: np.ndarray, dense_count: int, rng: np.random.Generator) -> CanonicalSurface:
    radius, height = params
    ring_r = HANDLE_RING_FRACTION * height
    tube_r = HANDLE_TUBE_FRACTION * ring_r
    body_area = 2.0 * math.pi * radius * height + math.pi * radius * radius
    handle_area = 2.0 * math.pi * math.pi * ring_r * tube_r
    on_handle = rng.random(dense_count) < handle_area / (body_area + handle_area)
    n_handle = int(on_handle.sum())
    pts = np.empty((dense_count, 3))
    nrm = np.empty((dense_count, 3))
    body_pts, body_nrm, _ = _open_cylinder_points(radius, height, dense_count - n_handle, rng)
    pts[~on_handle] = body_pts
    nrm[~on_handle] = body_nrm
    if n_handle:
        h_pts, h_nrm = _half_torus_points(ring_r, tube_r, n_handle, rng)
        h_pts[:, 0] += radius  # attach the ring to the wall
        pts[on_handle] = h_pts
        nrm[on_handle] = h_nrm
    return CanonicalSurface(pts.T, nrm.T, on_handle.astype(np.uint8))


def generate_canonical(category: str, shape_params: np.ndarray, dense_count: int,
                       rng: np.random.Generator) -> CanonicalSurface:
    """Area-uniform dense sample of a canonical shape with outward normals."""
    if dense_count <= 0:
        raise BadShapeParams(f"dense_count must be positive, got {dense_count}")
    params = np.asarray(shape_params, dtype=float)
    if category == "box":
        if params.shape != (3,):
            raise BadShapeParams(f"box wants 3 extents, got shape {params.shape}")
        _check_positive(params, "box extents")
        return _box_surface(params, dense_count, rng)
    if category == "cylinder":
        if params.shape != (2,):
            raise BadShapeParams(f"cylinder wants (radius, height), got shape {params.shape}")
        _check_positive(params, "cylinder dims")
        return _cylinder_surface(params, dense_count, rng)
    if category == "mug":
        if params.shape != (2,):
            raise BadShapeParams(f"mug wants (radius, height), got shape {params.shape}")
        _check_positive(params, "mug dims")
        return _mug_surface(params, dense_count, rng)
    raise BadShapeParams(f"unknown category {category!r}")


# ---------------------------------------------------------------------------
# partial views
# ---------------------------------------------------------------------------

def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    n = np.linalg.norm(v)
    while n < 1e-12:  # pragma: no cover - measure zero
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
    return v / n


def render_partial(surface: CanonicalSurface, rot: np.ndarray, t: np.ndarray,
                   view_dir: np.ndarray, n_points: int, jitter_sigma: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pose, cull, jitter, and resample a canonical surface.

    Points whose posed outward normal faces away from the viewer
    (``n . view_dir >= 0``) are dropped.  If fewer than ``n_points // 4``
    points survive, a fresh random view direction is drawn, up to 16
    attempts in total.  Survivors get isotropic Gaussian jitter and are then
    resampled (with replacement only if needed) to exactly ``n_points``.

    Returns (cloud (3, n_points), surviving dense indices, view_dir used).

    Raises:
        EmptyView: all retries left too little visible surface.
    """
    world_pts = rot @ surface.points + np.asarray(t, dtype=float)[:, None]
    world_nrm = rot @ surface.normals
    view = np.asarray(view_dir, dtype=float)
    view = view / np.linalg.norm(view)
    need = max(1, n_points // 4)
    for _ in range(MAX_VIEW_RETRIES):
        visible = np.where(view @ world_nrm < 0.0)[0]
        if visible.size >= need:
            break
        view = _random_unit(rng)
    else:
        raise EmptyView(
            f"no view left {need} of {surface.points.shape[1]} points after {MAX_VIEW_RETRIES} tries"
        )
    kept = world_pts[:, visible] + rng.normal(0.0, jitter_sigma, (3, visible.size))
    pick = rng.choice(visible.size, size=n_points, replace=visible.size < n_points)
    return kept[:, pick], visible, view


def normalize_instance(cloud: np.ndarray, pose: Pose) -> tuple[np.ndarray, Pose, np.ndarray, float]:
    """Shift to the cloud centroid and scale to unit max radius.

    The pose translation moves into the same normalized frame; rotation is
    untouched.  Returns (cloud_n, pose_n, centroid, scale).
    """
    cloud = np.asarray(cloud, dtype=float)
    centroid = cloud.mean(axis=1)
    centered = cloud - centroid[:, None]
    scale = float(np.linalg.norm(centered, axis=0).max())
    if scale <= 1e-12:
        raise DegenerateCloud("cloud has zero radius about its centroid")
    cloud_n = centered / scale
    pose_n = Pose(pose.rot6d.copy(), (pose.t - centroid) / scale)
    return cloud_n, pose_n, centroid, scale


# ---------------------------------------------------------------------------
# instances and datasets
# ---------------------------------------------------------------------------

@dataclass
class Instance:
    """One normalized partial-view observation with its ground truth.

    The rotation is stored as a canonical quaternion; ``gt_pose`` derives the
    6D form deterministically from it, so save/load round-trips every field
    bit-exactly.
    """

    category: str
    shape_params: np.ndarray
    quat: np.ndarray          # canonical (w, x, y, z) scene rotation
    t_normalized: np.ndarray  # translation in the normalized cloud frame
    cloud: np.ndarray         # (3, N), normalized
    centroid: np.ndarray      # scene-frame centroid removed from the cloud
    scale: float              # scene units per normalized unit
    handle_occluded: bool = False

    @property
    def gt_pose(self) -> Pose:
        return Pose(matrix_to_rot6d(quat_to_matrix(self.quat)), self.t_normalized)

    @property
    def symmetry_axis(self) -> np.ndarray | None:
        """Canonical-frame spin axis the metrics should forgive, if any."""
        if self.category == "cylinder":
            return np.array([0.0, 0.0, 1.0])
        if self.category == "mug" and self.handle_occluded:
            return np.array([0.0, 0.0, 1.0])
        return None


@dataclass
class DatasetConfig:
    n_instances: int
    n_points: int = 128
    categories: tuple[str, ...] = ("box", "cylinder")
    jitter_sigma: float = 0.002
    split: str = "train"
    dense_factor: int = 8  # dense_count = dense_factor * n_points
    # Consecutive instances per shape-and-crop group.  Members share one
    # canonical surface patch but carry independent rotations, translations,
    # jitter, and point subsets, so a trainer sees the same geometry under
    # many orientations instead of a fresh crop per orientation.
    poses_per_crop: int = 1
    # Scene rotations are uniform over the cone of angles <= this bound.
    # 180 means unrestricted SO(3) and reproduces the unbounded sampler
    # stream exactly.
    max_rotation_deg: float = 180.0

    def __post_init__(self) -> None:
        if self.n_instances <= 0:
            raise ValueError("n_instances must be positive")
        if self.n_points < 8:
            raise ValueError("n_points must be at least 8")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        if self.dense_factor < 4:
            raise ValueError("dense_factor must be >= 4")
        if self.poses_per_crop < 1:
            raise ValueError("poses_per_crop must be >= 1")
        if not 0.0 < self.max_rotation_deg <= 180.0:
            raise ValueError("max_rotation_deg must be in (0, 180]")
        for cat in self.categories:
            if cat not in CATEGORIES:
                raise ValueError(f"unknown category {cat!r}")


@dataclass
class DatasetFile:
    n_points: int
    categories: tuple[str, ...]
    seed: int
    split: str
    instances: list[Instance] = field(default_factory=list)
    scene_scale: float = 1.0  # meters per scene unit

    def clouds(self) -> np.ndarray:
        return np.stack([inst.cloud for inst in self.instances])

    def gt_vectors(self) -> np.ndarray:
        return np.stack([inst.gt_pose.as_vector() for inst in self.instances])


def draw_shape_params(category: str, split: str, rng: np.random.Generator) -> np.ndarray:
    ranges = PARAM_RANGES[category][split]
    if category == "box":
        lo, hi = ranges[0]
        return rng.uniform(lo, hi, 3)
    return np.array([rng.uniform(lo, hi) for lo, hi in ranges])


def build_instance_group(category: str, cfg: DatasetConfig, group_rng: np.random.Generator,
                         member_rngs: list) -> list:
    """One shape and canonical crop observed under several orientations.

    The group stream draws the shape, the dense surface, and a canonical-frame
    view direction ``u``; each member stream draws its own rotation R,
    translation, jitter, and point subset.  Rendering a member with the
    co-rotated world view direction R·u keeps the visible patch identical
    across members (the culling test (R·n)·(R·u) equals n·u), so every member
    shows the same geometry at a different pose.
    """
    params = draw_shape_params(category, cfg.split, group_rng)
    surface = generate_canonical(category, params, cfg.dense_factor * cfg.n_points, group_rng)
    u = _random_unit(group_rng)
    out = []
    for rng in member_rngs:
        rot = random_rotation_within(rng, cfg.max_rotation_deg)
        t = rng.uniform(-0.5, 0.5, 3)
        cloud, visible, _ = render_partial(
            surface, rot, t, rot @ u, cfg.n_points, cfg.jitter_sigma, rng
        )
        handle_occluded = False
        if category == "mug":
            frac = float(surface.labels[visible].mean()) if visible.size else 0.0
            handle_occluded = frac < HANDLE_OCCLUDED_BELOW
        pose = Pose.from_matrix(rot, t)
        cloud_n, pose_n, centroid, scale = normalize_instance(cloud, pose)
        out.append(Instance(
            category=category,
            shape_params=params,
            quat=matrix_to_quat(rot),
            t_normalized=pose_n.t,
            cloud=cloud_n,
            centroid=centroid,
            scale=scale,
            handle_occluded=handle_occluded,
        ))
    return out


def build_instance(category: str, cfg: DatasetConfig, rng: np.random.Generator) -> Instance:
    """Sample shape, pose, and view; render and normalize one instance."""
    return build_instance_group(category, cfg, rng, [rng])[0]


def build_dataset(cfg: DatasetConfig, seed: int) -> DatasetFile:
    """Generate a dataset deterministically from one root seed.

    Shape/crop groups and individual instances draw from their own derived
    streams, so generation order (or parallel generation) cannot change the
    result.
    """
    instances = []
    v = cfg.poses_per_crop
    n_groups = -(-cfg.n_instances // v)
    for g in range(n_groups):
        group_rng = derive_rng(seed, f"dataset.{cfg.split}.group.{g}")
        category = cfg.categories[g % len(cfg.categories)]
        members = range(g * v, min((g + 1) * v, cfg.n_instances))
        member_rngs = [derive_rng(seed, f"dataset.{cfg.split}.instance.{m}")
                       for m in members]
        instances.extend(build_instance_group(category, cfg, group_rng, member_rngs))
    return DatasetFile(
        n_points=cfg.n_points,
        categories=tuple(cfg.categories),
        seed=seed,
        split=cfg.split,
        instances=instances,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_vec(v: np.ndarray) -> str:
    return " ".join(_fmt(x) for x in v)


def save_dataset(ds: DatasetFile, path) -> None:
    """Write the line-oriented text format; floats use shortest round-trip reprs."""
    lines = [
        f"{FORMAT_TAG} {FORMAT_VERSION}",
        f"n_points = {ds.n_points}",
        f"count = {len(ds.instances)}",
        f"categories = {','.join(ds.categories)}",
        f"seed = {ds.seed}",
        f"scene_scale = {_fmt(ds.scene_scale)}",
        f"split = {ds.split}",
    ]
    for i, inst in enumerate(ds.instances):
        lines.append(f"instance {i}")
        lines.append(f"category = {inst.category}")
        lines.append(f"shape = {_fmt_vec(inst.shape_params)}")
        lines.append(f"quat = {_fmt_vec(inst.quat)}")
        lines.append(f"trans = {_fmt_vec(inst.t_normalized)}")
        lines.append(f"centroid = {_fmt_vec(inst.centroid)}")
        lines.append(f"scale = {_fmt(inst.scale)}")
        lines.append(f"handle_occluded = {int(inst.handle_occluded)}")
        lines.append("points")
        for col in inst.cloud.T:
            lines.append(_fmt_vec(col))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, lines: list[str]) -> None:
        self.lines = lines
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.lines):
            raise ValueError("unexpected end of dataset file")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def expect_kv(self, key: str) -> str:
        line = self.next()
        prefix = f"{key} = "
        if not line.startswith(prefix):
            raise ValueError(f"expected {key!r} entry, got {line!r}")
        return line[len(prefix):]


def load_dataset(path) -> DatasetFile:
    """Parse a dataset file back into bit-identical instances.

    Raises:
        FormatVersionMismatch: tag/version line is not the supported one.
        OSError: propagated for unreadable paths.
        ValueError: structurally broken content.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    rd = _LineReader(lines)
    head = rd.next().split()
    if len(head) != 2 or head[0] != FORMAT_TAG or head[1] != FORMAT_VERSION:
        raise FormatVersionMismatch(f"unsupported dataset header {' '.join(head)!r}")
    n_points = int(rd.expect_kv("n_points"))
    count = int(rd.expect_kv("count"))
    categories = tuple(rd.expect_kv("categories").split(","))
    seed = int(rd.expect_kv("seed"))
    scene_scale = float(rd.expect_kv("scene_scale"))
    split = rd.expect_kv("split")
    instances = []
    for i in range(count):
        tag = rd.next()
        if tag != f"instance {i}":
            raise ValueError(f"expected 'instance {i}', got {tag!r}")
        category = rd.expect_kv("category")
        shape = np.array([float(x) for x in rd.expect_kv("shape").split()])
        quat = np.array([float(x) for x in rd.expect_kv("quat").split()])
        trans = np.array([float(x) for x in rd.expect_kv("trans").split()])
        centroid = np.array([float(x) for x in rd.expect_kv("centroid").split()])
        scale = float(rd.expect_kv("scale"))
        handle = bool(int(rd.expect_kv("handle_occluded")))
        if rd.next() != "points":
            raise ValueError("expected points block")
        cloud = np.empty((n_points, 3))
        for j in range(n_points):
            cloud[j] = [float(x) for x in rd.next().split()]
        instances.append(
            Instance(
                category=category,
                shape_params=shape,
                quat=quat,
                t_normalized=trans,
                cloud=cloud.T.copy(),
                centroid=centroid,
                scale=scale,
                handle_occluded=handle,
            )
        )
    return DatasetFile(
        n_points=n_points,
        categories=categories,
        seed=seed,
        split=split,
        instances=instances,
        scene_scale=scene_scale,
    )
