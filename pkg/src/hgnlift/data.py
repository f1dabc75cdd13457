"""Synthetic human-pose data: seeded scene generation, perspective projection,
coarse mesh targets, and a line-oriented JSON dataset format.

A sample is one scene: joint angles drawn uniformly within per-bone ranges,
forward kinematics to 3D (millimetres, pelvis at the origin), a pinhole camera
on the +z axis at a sampled distance, and optional Gaussian noise on the 2D
projection.  Mesh targets are cluster means of the skinned source mesh, pooled
through a coarsening hierarchy, so they are an exact linear function of the
3D joints.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import skeleton
from .graphs import build_synthetic_body_mesh, pool_positions

DATASET_FORMAT_VERSION = 1

# action tag -> multiplier on the joint-angle ranges; harder actions move more
ACTIONS = (("calm", 0.4), ("walk", 0.7), ("stretch", 1.0), ("reach", 1.3))
N_SUBJECTS = 5

# per-bone rotation half-range in radians, indexed like skeleton.EDGES;
# hips and spine stay stiff, knees and elbows articulate the most
DEFAULT_ANGLE_RANGES = (
    0.25, 0.9, 1.1,          # right leg: hip offset, thigh, shin
    0.25, 0.9, 1.1,          # left leg
    0.2, 0.25, 0.3, 0.35,    # spine, chest, neck, head
    0.3, 1.1, 1.2,           # left arm: shoulder, upper arm, forearm
    0.3, 1.1, 1.2,           # right arm
)

_REST_DIRECTIONS = np.array([
    (skeleton.REST_JOINTS[c] - skeleton.REST_JOINTS[p])
    / np.linalg.norm(skeleton.REST_JOINTS[c] - skeleton.REST_JOINTS[p])
    for p, c in skeleton.EDGES
])


@dataclass
class PoseSample:
    """One scene: 2D detections in, 3D joints (and optional mesh targets) out.

    joints2d is in normalized image units (focal-scaled), joints3d in
    millimetres with the pelvis row at the origin.  Mesh targets, when
    present, are pelvis-rooted millimetre positions of the coarse vertices.
    """

    joints2d: np.ndarray
    joints3d: np.ndarray
    mesh_mid: np.ndarray | None = None
    mesh_top: np.ndarray | None = None
    action: str = ""
    subject: str = ""


@dataclass
class Dataset:
    """Samples plus provenance: generator echo, hierarchy checksum, joint
    order, and lateral pairing live in `meta` so consumers can check
    compatibility before training."""

    samples: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)


@dataclass
class CameraView:
    """Pinhole camera on the +z axis; the subject's pelvis sits on the axis
    at `distance` millimetres."""

    focal_length: float
    distance: float


def _max_reach(bone_lengths):
    depth = {skeleton.ROOT: 0.0}
    for b, (p, c) in enumerate(skeleton.EDGES):
        depth[c] = depth[p] + bone_lengths[b]
    return max(depth.values())


@dataclass
class SyntheticGenConfig:
    n_samples: int
    seed: int = 0
    bone_lengths: tuple = tuple(float(x) for x in skeleton.BONE_LENGTHS)
    angle_ranges: tuple = DEFAULT_ANGLE_RANGES
    focal_length: float = 1.0
    distance_range: tuple = (4000.0, 6000.0)
    n_mesh_vertices: int = 6890
    mesh_seed: int = 0
    noise_std_2d: float = 0.0

    def __post_init__(self):
        self.bone_lengths = tuple(float(x) for x in self.bone_lengths)
        self.angle_ranges = tuple(float(x) for x in self.angle_ranges)
        self.distance_range = tuple(float(x) for x in self.distance_range)
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if len(self.bone_lengths) != len(skeleton.EDGES):
            raise ValueError(f"expected {len(skeleton.EDGES)} bone lengths, got {len(self.bone_lengths)}")
        if any(x <= 0 for x in self.bone_lengths):
            raise ValueError("bone lengths must be positive")
        if len(self.angle_ranges) != len(skeleton.EDGES):
            raise ValueError(f"expected {len(skeleton.EDGES)} angle ranges, got {len(self.angle_ranges)}")
        if any(r < 0 or r > math.pi for r in self.angle_ranges):
            raise ValueError("angle ranges must lie in [0, pi]")
        if self.focal_length <= 0:
            raise ValueError("focal length must be positive")
        lo, hi = self.distance_range
        if not 0 < lo <= hi:
            raise ValueError("distance range must satisfy 0 < min <= max")
        reach = _max_reach(self.bone_lengths)
        if lo <= 1.05 * reach:
            raise ValueError(
                f"min camera distance {lo:.0f} mm does not clear the pose reach {reach:.0f} mm")
        if self.noise_std_2d < 0:
            raise ValueError("noise_std_2d must be non-negative")
        if self.n_mesh_vertices < 200:
            raise ValueError("n_mesh_vertices must be at least 200")


def _rodrigues(axis, angle):
    """Rotation matrix about a unit axis."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def _random_axis(rng):
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0])
    return v / n


def forward_kinematics(bone_lengths, root_rotation, bone_rotations):
    """Joint positions (17, 3) in mm, pelvis exactly at the origin.

    Each bone's frame is its parent frame times its local rotation; the bone
    points along its rotated rest direction at the given length, so segment
    lengths are preserved to round-off.
    """
    joints = np.zeros((skeleton.N_JOINTS, 3))
    frames = {skeleton.ROOT: np.asarray(root_rotation, dtype=np.float64)}
    for b, (p, c) in enumerate(skeleton.EDGES):
        frame = frames[p] @ bone_rotations[b]
        joints[c] = joints[p] + bone_lengths[b] * (frame @ _REST_DIRECTIONS[b])
        frames[c] = frame
    return joints


def project(joints3d, camera):
    """Perspective projection of a pelvis-rooted pose through `camera`.

    The pelvis is placed on the optical axis at camera.distance, so
    u = f*x/z, v = f*y/z in normalized image units.
    """
    j = np.asarray(joints3d, dtype=np.float64)
    cam = j + np.array([0.0, 0.0, camera.distance])
    z = cam[:, 2:3]
    if np.any(z <= 0):
        raise ValueError("subject crosses the camera plane; increase the distance range")
    return camera.focal_length * cam[:, :2] / z


def root_center(joints3d):
    """Subtract the pelvis row.  Idempotent; accepts (..., 17, 3)."""
    j = np.asarray(joints3d, dtype=np.float64)
    return j - j[..., skeleton.ROOT : skeleton.ROOT + 1, :]


def _two_selected(hierarchy):
    if hierarchy is None or len(hierarchy.selected) < 2:
        raise ValueError("hierarchy must select two mesh scales")
    lo, hi = sorted(hierarchy.selected, key=lambda s: s.graph.n_nodes)
    return lo, hi


def make_pseudo_gt(mesh_vertices, hierarchy):
    """Coarse mesh targets (mesh_top, mesh_mid) by cluster-mean pooling.

    Accepts a CoarseningHierarchy or a HierarchySnapshot; `top` is the larger
    of the two selected levels.
    """
    v = np.asarray(mesh_vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError(f"mesh vertices must be (V, 3), got {v.shape}")
    if v.shape[0] != hierarchy.n_source:
        raise ValueError(
            f"mesh has {v.shape[0]} vertices, hierarchy was built from {hierarchy.n_source}")
    lo, hi = _two_selected(hierarchy)
    mesh_mid = pool_positions(v, lo.composed_map, lo.graph.n_nodes)
    mesh_top = pool_positions(v, hi.composed_map, hi.graph.n_nodes)
    return mesh_top, mesh_mid


def coarse_mirror_map(mirror_map, composed_map, n_coarse):
    """Lift a source-vertex mirror permutation to a coarse level.

    Returns the coarse permutation when every cluster mirrors onto a single
    cluster and the result is an involution; returns None when the coarsening
    broke lateral symmetry (callers then drop mesh targets on flip).
    """
    m = np.full(n_coarse, -1, dtype=np.int64)
    for v, mv in enumerate(mirror_map):
        c, mc = composed_map[v], composed_map[mv]
        if m[c] == -1:
            m[c] = mc
        elif m[c] != mc:
            return None
    if np.any(m == -1):
        return None
    if not np.array_equal(m[m], np.arange(n_coarse)):
        return None
    return m


def _check_hierarchy_matches(mesh_graph, hierarchy):
    src = hierarchy.source
    same = (
        src.n_nodes == mesh_graph.n_nodes
        and np.array_equal(src.ei, mesh_graph.ei)
        and np.array_equal(src.ej, mesh_graph.ej)
        and np.array_equal(src.w, mesh_graph.w)
    )
    if not same:
        raise ValueError(
            "hierarchy was not built from the configured mesh "
            f"(mesh has {mesh_graph.n_nodes} vertices, hierarchy source {src.n_nodes})")


def _config_echo(cfg):
    echo = dataclasses.asdict(cfg)
    for key, value in echo.items():
        if isinstance(value, tuple):
            echo[key] = list(value)
    return echo


def generate_synthetic(cfg, hierarchy):
    """Seeded scene generation against a mesh coarsening hierarchy.

    The source mesh is rebuilt from (n_mesh_vertices, mesh_seed) and must be
    the one the hierarchy was coarsened from.  Pose and camera draws come from
    one stream, 2D noise from a second, so noise_std_2d never perturbs the
    3D poses a seed produces.
    """
    mesh = build_synthetic_body_mesh(cfg.n_mesh_vertices, seed=cfg.mesh_seed)
    _check_hierarchy_matches(mesh.graph, hierarchy)
    lo, hi = _two_selected(hierarchy)
    rng_pose = np.random.default_rng([cfg.seed, 0])
    rng_noise = np.random.default_rng([cfg.seed, 1])
    lengths = np.asarray(cfg.bone_lengths)
    samples = []
    distances = []
    for i in range(cfg.n_samples):
        action, angle_scale = ACTIONS[i % len(ACTIONS)]
        subject = f"S{1 + i % N_SUBJECTS}"
        yaw = rng_pose.uniform(-math.pi, math.pi)
        root_rot = _rodrigues(np.array([0.0, 1.0, 0.0]), yaw)
        bone_rots = []
        for r in cfg.angle_ranges:
            axis = _random_axis(rng_pose)
            angle = rng_pose.uniform(-r * angle_scale, r * angle_scale)
            bone_rots.append(_rodrigues(axis, angle))
        joints = forward_kinematics(lengths, root_rot, bone_rots)
        camera = CameraView(cfg.focal_length, rng_pose.uniform(*cfg.distance_range))
        joints2d = project(joints, camera)
        if cfg.noise_std_2d > 0:
            joints2d = joints2d + rng_noise.normal(0.0, cfg.noise_std_2d, size=joints2d.shape)
        verts = mesh.skinning @ joints + mesh.offsets
        mesh_top, mesh_mid = make_pseudo_gt(verts, hierarchy)
        samples.append(PoseSample(
            joints2d=joints2d, joints3d=joints,
            mesh_mid=mesh_mid, mesh_top=mesh_top,
            action=action, subject=subject))
        distances.append(camera.distance)
    meta = {
        "generator": _config_echo(cfg),
        "hierarchy_checksum": hierarchy.checksum(),
        "joint_names": list(skeleton.JOINT_NAMES),
        "left_right_pairs": [list(p) for p in skeleton.LEFT_RIGHT_PAIRS],
        "camera": {"focal_length": cfg.focal_length, "distances": distances},
        "mesh_sizes": {"mid": int(lo.graph.n_nodes), "top": int(hi.graph.n_nodes)},
    }
    return Dataset(samples=samples, meta=meta)


def validate_sample(sample):
    """Shape, finiteness, and pelvis-at-origin checks; raises ValueError."""
    j2 = np.asarray(sample.joints2d)
    j3 = np.asarray(sample.joints3d)
    if j2.shape != (skeleton.N_JOINTS, 2):
        raise ValueError(f"joints2d must be ({skeleton.N_JOINTS}, 2), got {j2.shape}")
    if j3.shape != (skeleton.N_JOINTS, 3):
        raise ValueError(f"joints3d must be ({skeleton.N_JOINTS}, 3), got {j3.shape}")
    if not (np.all(np.isfinite(j2)) and np.all(np.isfinite(j3))):
        raise ValueError("sample contains non-finite joint values")
    if np.any(np.abs(j3[skeleton.ROOT]) > 1e-9):
        raise ValueError("joints3d must be pelvis-rooted (root row at the origin)")
    for name in ("mesh_mid", "mesh_top"):
        mesh = getattr(sample, name)
        if mesh is None:
            continue
        mesh = np.asarray(mesh)
        if mesh.ndim != 2 or mesh.shape[1] != 3:
            raise ValueError(f"{name} must be (V, 3), got {mesh.shape}")
        if not np.all(np.isfinite(mesh)):
            raise ValueError(f"{name} contains non-finite values")


def assert_compatible(dataset, hierarchy):
    """Raise when the dataset's recorded hierarchy checksum does not match."""
    want = dataset.meta.get("hierarchy_checksum")
    if want is None:
        return
    got = hierarchy.checksum()
    if want != got:
        raise ValueError(
            f"dataset was generated for hierarchy {want[:12]}..., this one is {got[:12]}...")


def dataset_arrays(dataset):
    """Stacked arrays for training: (x2d, y3d, mesh_mid, mesh_top, mesh_mask).

    Mesh arrays are None when no sample carries targets; otherwise absent
    samples hold zero rows and mesh_mask marks which rows are real.
    """
    x2d = np.stack([np.asarray(s.joints2d, dtype=np.float64) for s in dataset.samples])
    y3d = np.stack([np.asarray(s.joints3d, dtype=np.float64) for s in dataset.samples])
    mask = np.array(
        [s.mesh_mid is not None and s.mesh_top is not None for s in dataset.samples])
    if not mask.any():
        return x2d, y3d, None, None, None
    shape_mid = next(np.asarray(s.mesh_mid).shape for s in dataset.samples if s.mesh_mid is not None)
    shape_top = next(np.asarray(s.mesh_top).shape for s in dataset.samples if s.mesh_top is not None)
    mesh_mid = np.zeros((len(dataset.samples),) + shape_mid)
    mesh_top = np.zeros((len(dataset.samples),) + shape_top)
    for i, s in enumerate(dataset.samples):
        if mask[i]:
            mesh_mid[i] = s.mesh_mid
            mesh_top[i] = s.mesh_top
    return x2d, y3d, mesh_mid, mesh_top, mask


def save_dataset(path, dataset):
    """Header JSON line (version, meta), then one JSON record per sample.

    Floats go through repr, so every value round-trips bit-exactly.
    """
    with open(path, "w") as f:
        f.write(json.dumps({"version": DATASET_FORMAT_VERSION, "meta": dataset.meta}) + "\n")
        for s in dataset.samples:
            rec = {
                "joints2d": np.asarray(s.joints2d).tolist(),
                "joints3d": np.asarray(s.joints3d).tolist(),
                "mesh_mid": None if s.mesh_mid is None else np.asarray(s.mesh_mid).tolist(),
                "mesh_top": None if s.mesh_top is None else np.asarray(s.mesh_top).tolist(),
                "action": s.action,
                "subject": s.subject,
            }
            f.write(json.dumps(rec) + "\n")


_RECORD_KEYS = ("joints2d", "joints3d", "mesh_mid", "mesh_top", "action", "subject")


def _sample_from_record(rec):
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    missing = [k for k in _RECORD_KEYS if k not in rec]
    if missing:
        raise ValueError(f"record is missing fields {missing}")
    sample = PoseSample(
        joints2d=np.asarray(rec["joints2d"], dtype=np.float64),
        joints3d=np.asarray(rec["joints3d"], dtype=np.float64),
        mesh_mid=None if rec["mesh_mid"] is None else np.asarray(rec["mesh_mid"], dtype=np.float64),
        mesh_top=None if rec["mesh_top"] is None else np.asarray(rec["mesh_top"], dtype=np.float64),
        action=str(rec["action"]),
        subject=str(rec["subject"]),
    )
    validate_sample(sample)
    return sample


def load_dataset(path):
    """Parse and validate a saved dataset; errors carry the offending line."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].strip():
        raise ValueError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}:1: malformed dataset header ({e})") from e
    if not isinstance(header, dict) or "version" not in header:
        raise ValueError(f"{path}:1: dataset header must carry a version")
    if header["version"] != DATASET_FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported dataset version {header['version']!r}, "
            f"this reader handles {DATASET_FORMAT_VERSION}")
    samples = []
    mesh_shapes = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            sample = _sample_from_record(json.loads(line))
        except (json.JSONDecodeError, ValueError, TypeError) as e:
            raise ValueError(
                f"{path}:{lineno}: malformed record after {len(samples)} good samples ({e})") from e
        for name in ("mesh_mid", "mesh_top"):
            mesh = getattr(sample, name)
            if mesh is None:
                continue
            if name in mesh_shapes and mesh_shapes[name] != mesh.shape:
                raise ValueError(
                    f"{path}:{lineno}: {name} shape {mesh.shape} disagrees with "
                    f"earlier samples {mesh_shapes[name]}")
            mesh_shapes[name] = mesh.shape
        samples.append(sample)
    return Dataset(samples=samples, meta=header.get("meta", {}))
