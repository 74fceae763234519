"""Synthetic deformable shapes with exact correspondence, datasets, checkpoints.

The canonical shape is a stick figure standing along +z, arms spread along
+-y, feet pointing to +x.  Every body part is a cylinder (the head a sphere)
sampled with a deterministic Fibonacci lattice, so a given ``N`` always yields
the same points.  A pose warps the figure; the warped point ``i`` is the
ground-truth image of canonical point ``i``.

Pose vector (radians unless noted), applied innermost first:

====  ===============  ================  =====================================
idx   name             range             effect
====  ===============  ================  =====================================
0     global_yaw       [-pi/12, pi/12]   rigid rotation about z, applied last
1     torso_bend       [-0.4, 0.4]       upper body about y at the pelvis
2     left_arm_raise   [-0.9, 0.9]       left arm about x at the shoulder
3     right_arm_raise  [-0.9, 0.9]       right arm, mirrored
4     left_leg_spread  [-0.35, 0.35]     left leg about x at the hip
5     right_leg_spread [-0.35, 0.35]     right leg, mirrored
6     leg_swing        [-0.5, 0.5]       legs about y at the hips, opposite
7     axial_stretch    [-0.15, 0.15]     z scaled by ``1 + value`` (unitless)
====  ===============  ================  =====================================

Limb rotations fade in over the first fifth of the limb and the torso bend
fades in along the torso (smoothstep), so the warp is continuous.  No point
moves further than ``WARP_DISPLACEMENT_BOUND * sum(|pose|)`` from its
canonical position.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloudio import atomic_write_text, load_cloud, save_cloud
from .diffcore import AdamState
from .errors import ContractError, FormatError
from .geometry import PointCloud
from .model import MODEL_KINDS, ModelConfig

POSE_NAMES = (
    "global_yaw",
    "torso_bend",
    "left_arm_raise",
    "right_arm_raise",
    "left_leg_spread",
    "right_leg_spread",
    "leg_swing",
    "axial_stretch",
)
POSE_LOW = np.array([-np.pi / 12, -0.4, -0.9, -0.9, -0.35, -0.35, -0.5, -0.15])
POSE_HIGH = -POSE_LOW
# every canonical point lies in the unit ball, so a rotation by theta about any
# joint inside it moves a point by at most 2*|theta|; the stretch by at most |s|
WARP_DISPLACEMENT_BOUND = 2.0

PELVIS = np.array([0.0, 0.0, -0.05])
SHOULDER_L = np.array([0.0, 0.15, 0.4])
HIP_L = np.array([0.0, 0.08, -0.05])
LIMB_FADE = 0.2

# name: (start, end, radius) of a cylinder, or (centre, None, radius) for a sphere
PARTS = {
    "torso": (PELVIS, np.array([0.0, 0.0, 0.45]), 0.12),
    "head": (np.array([0.0, 0.0, 0.6]), None, 0.12),
    "arm_l": (SHOULDER_L, np.array([0.0, 0.72, 0.4]), 0.05),
    "arm_r": (SHOULDER_L * [1, -1, 1], np.array([0.0, -0.72, 0.4]), 0.05),
    "leg_l": (HIP_L, np.array([0.0, 0.12, -0.78]), 0.06),
    "leg_r": (HIP_L * [1, -1, 1], np.array([0.0, -0.12, -0.78]), 0.06),
    "foot_l": (np.array([0.0, 0.12, -0.78]), np.array([0.17, 0.12, -0.84]), 0.04),
    "foot_r": (np.array([0.0, -0.12, -0.78]), np.array([0.17, -0.12, -0.84]), 0.04),
}
PART_NAMES = tuple(PARTS)
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class CanonicalParts:
    points: np.ndarray  # (N, 3)
    part: np.ndarray  # (N,) index into PART_NAMES
    t: np.ndarray  # (N,) axial parameter in [0, 1] along the part (0 for the head)


def _part_area(name):
    a, b, r = PARTS[name]
    if b is None:
        return 4.0 * np.pi * r * r
    return 2.0 * np.pi * r * np.linalg.norm(b - a)


def _allocate(n):
    areas = np.array([_part_area(p) for p in PART_NAMES])
    share = areas / areas.sum() * n
    counts = np.floor(share).astype(int)
    counts = np.maximum(counts, 1)
    order = np.argsort(-(share - np.floor(share)), kind="stable")
    k = 0
    while counts.sum() < n:
        counts[order[k % len(order)]] += 1
        k += 1
    while counts.sum() > n:
        j = int(np.argmax(counts))
        counts[j] -= 1
    return counts


def _frame(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def canonical_parts(n):
    """Points of the canonical figure with their part labels and axial positions."""
    if n < len(PART_NAMES):
        raise ContractError(f"need at least {len(PART_NAMES)} points, got {n}")
    pts, part, ts = [], [], []
    for j, (name, count) in enumerate(zip(PART_NAMES, _allocate(n))):
        a, b, r = PARTS[name]
        k = np.arange(count)
        if b is None:
            z = 1.0 - 2.0 * (k + 0.5) / count
            phi = 2.0 * np.pi * ((k * _GOLDEN) % 1.0)
            rho = np.sqrt(1.0 - z * z)
            p = a + r * np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
            t = np.zeros(count)
        else:
            t = (k + 0.5) / count
            phi = 2.0 * np.pi * ((k * _GOLDEN) % 1.0)
            u, w = _frame(b - a)
            p = a + t[:, None] * (b - a) + r * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * w)
        pts.append(p)
        part.append(np.full(count, j))
        ts.append(t)
    return CanonicalParts(np.concatenate(pts), np.concatenate(part), np.concatenate(ts))


def canonical_shape(n):
    """The canonical stick figure as exactly ``n`` points; deterministic in ``n``."""
    return PointCloud(canonical_parts(n).points, name=f"canonical_{n}")


# -- warp --------------------------------------------------------------------


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _rot_x(theta):
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_y(theta):
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def _rotate_about(points, joint, R):
    # R (N, 3, 3) per point; displacement form keeps zero angles exact
    return points + np.einsum("nij,nj->ni", R - np.eye(3), points - joint)


def check_pose(pose):
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (len(POSE_NAMES),):
        raise ContractError(f"pose must have {len(POSE_NAMES)} entries, got shape {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ContractError("pose contains non-finite values")
    bad = (pose < POSE_LOW - 1e-12) | (pose > POSE_HIGH + 1e-12)
    if bad.any():
        names = [POSE_NAMES[i] for i in np.nonzero(bad)[0]]
        raise ContractError(f"pose out of bounds: {', '.join(names)}")
    return pose


def warp(parts, pose):
    """Apply a pose to canonical points (vectorised)."""
    pose = check_pose(pose)
    yaw, bend, arm_l, arm_r, spread_l, spread_r, swing, stretch = pose
    p = parts.points.copy()
    name = np.array(PART_NAMES)[parts.part]
    fade = _smoothstep(parts.t / LIMB_FADE)

    for side, sign in (("l", 1.0), ("r", -1.0)):
        arm = name == f"arm_{side}"
        raise_ = arm_l if side == "l" else arm_r
        joint = SHOULDER_L * [1, sign, 1]
        p[arm] = _rotate_about(p[arm], joint, _rot_x(sign * raise_ * fade[arm]))

        leg = name == f"leg_{side}"
        foot = name == f"foot_{side}"
        limb = leg | foot
        w = np.where(leg, fade, 1.0)[limb]
        spread = spread_l if side == "l" else spread_r
        R = _rot_y(sign * swing * w) @ _rot_x(sign * spread * w)
        p[limb] = _rotate_about(p[limb], HIP_L * [1, sign, 1], R)

    upper = np.isin(name, ["torso", "head", "arm_l", "arm_r"])
    w = np.where(name == "torso", _smoothstep(parts.t), 1.0)[upper]
    p[upper] = _rotate_about(p[upper], PELVIS, _rot_y(bend * w))

    p[:, 2] *= 1.0 + stretch
    return p + p @ (_rot_z(np.float64(yaw)) - np.eye(3)).T


@dataclass
class CorrespondencePair:
    """A posed shape; ``gt_targets[i]`` is the image of canonical point ``i``.

    The shape is emitted in canonical index order, so ``shape`` and
    ``gt_targets`` hold the same points in the same order.
    """

    shape: PointCloud
    gt_targets: PointCloud
    pose: np.ndarray = field(default_factory=lambda: np.zeros(len(POSE_NAMES)))


def deform_shape(pose, n):
    parts = canonical_parts(n)
    moved = warp(parts, pose)
    return CorrespondencePair(PointCloud(moved.copy()), PointCloud(moved.copy()), np.asarray(pose, dtype=float))


def sample_pose(rng):
    return rng.uniform(POSE_LOW, POSE_HIGH)


def generate_dataset(count, n, seed):
    """``count`` shapes with poses drawn uniformly within bounds."""
    if count < 1:
        raise ContractError("count must be at least 1")
    rng = np.random.default_rng(seed)
    parts = canonical_parts(n)
    out = []
    for k in range(count):
        pose = sample_pose(rng)
        moved = warp(parts, pose)
        out.append(CorrespondencePair(PointCloud(moved.copy(), f"shape_{k:05d}"), PointCloud(moved), pose))
    return out


# -- dataset directory -------------------------------------------------------

INDEX_FILE = "index.txt"


def write_dataset(pairs, directory, format="xyz", seed=None):
    """One cloud file per shape plus ``index.txt`` (id, file, pose columns)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    if seed is not None:
        lines.append(f"# seed {seed}")
    lines.append("# id file " + " ".join(POSE_NAMES))
    for k, pair in enumerate(pairs):
        fname = f"shape_{k:05d}.{format}"
        save_cloud(pair.shape, directory / fname, format)
        lines.append(f"{k} {fname} " + " ".join(repr(float(v)) for v in pair.pose))
    atomic_write_text(directory / INDEX_FILE, "\n".join(lines) + "\n")


def read_dataset(directory):
    directory = Path(directory)
    index = directory / INDEX_FILE
    if not index.exists():
        raise FormatError(f"{directory} has no {INDEX_FILE}")
    pairs = []
    for lineno, line in enumerate(index.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 2 + len(POSE_NAMES):
            raise FormatError(f"{INDEX_FILE}: expected {2 + len(POSE_NAMES)} columns", line=lineno)
        cloud = load_cloud(directory / fields[1])
        pose = np.array([float(v) for v in fields[2:]])
        pairs.append(CorrespondencePair(cloud, PointCloud(cloud.points.copy(), cloud.name), pose))
    return pairs


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"MDEFCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sII")


@dataclass
class ModelBundle:
    """A model with optional optimizer state and free-form training info."""

    model: object
    optimizer: AdamState | None = None
    info: dict = field(default_factory=dict)


def _entries(bundle):
    model = bundle.model
    items = [("template.base", model.template_base)]
    items += list(model.params.items())
    opt = bundle.optimizer
    if opt is not None:
        for k in model.params:
            if k in opt.m:
                items.append((f"adam.m.{k}", opt.m[k]))
                items.append((f"adam.v.{k}", opt.v[k]))
    return items


def save_checkpoint(bundle, path):
    """Write ``magic | version | metadata length | JSON metadata | raw arrays``.

    Arrays are little-endian, C order, in the order listed in the metadata.
    """
    if not isinstance(bundle, ModelBundle):
        bundle = ModelBundle(bundle)
    model = bundle.model
    entries = _entries(bundle)
    meta = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "n_template": model.config.n_template,
        "decoder_layers": model.config.decoder_layers,
        "dtype": model.config.dtype,
        "arrays": [[k, np.asarray(a).dtype.newbyteorder("<").str, list(np.shape(a))] for k, a in entries],
        "info": bundle.info,
    }
    if bundle.optimizer is not None:
        o = bundle.optimizer
        meta["adam"] = {"beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "t": o.t}
    blob = json.dumps(meta, sort_keys=True).encode()
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)), blob]
    for _, arr in entries:
        arr = np.ascontiguousarray(arr)
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    payload = b"".join(chunks)
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        tmp.write_bytes(payload)
        tmp.replace(path)
    finally:
        if tmp.exists():
            tmp.unlink()


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint truncated in header", offset=len(data))
    magic, version, nmeta = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})", offset=8)
    pos = _HEADER.size
    if len(data) < pos + nmeta:
        raise FormatError("checkpoint truncated in metadata", offset=len(data))
    try:
        meta = json.loads(data[pos : pos + nmeta])
    except ValueError:
        raise FormatError("checkpoint metadata is not valid JSON", offset=pos) from None
    pos += nmeta
    arrays = {}
    for name, dtype, shape in meta["arrays"]:
        dt = np.dtype(dtype)
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if len(data) < pos + nbytes:
            raise FormatError(f"checkpoint truncated in array {name!r}", offset=len(data))
        arrays[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload", offset=pos)
    cfg = dict(meta["config"])
    config = ModelConfig(**cfg)
    cls = MODEL_KINDS.get(meta["kind"])
    if cls is None:
        raise FormatError(f"unknown model kind {meta['kind']!r}")
    params = {k: v for k, v in arrays.items() if not k.startswith(("adam.", "template.base"))}
    model = cls(config, arrays["template.base"], params=params, seed=meta["seed"])
    optimizer = None
    if "adam" in meta:
        a = meta["adam"]
        optimizer = AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
        for k in params:
            if f"adam.m.{k}" in arrays:
                optimizer.m[k] = arrays[f"adam.m.{k}"]
                optimizer.v[k] = arrays[f"adam.v.{k}"]
    return ModelBundle(model, optimizer, meta.get("info", {}))
